//! EM driver: initialization, the penalized EM loop and post-hoc merging of
//! fused groups.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gamma::{update_gamma_all, LqaWorkspace};
use crate::init::{default_lasso_level, sparse_mixture_start};
use crate::likelihood::{
    e_step, mixture_loglik, penalized_objective, update_pi, weighted_moments, WeightedMoments,
};
use crate::model::{
    edge_set, regulation_set, Dataset, FitDiagnostics, FitResult, GroupParams, Hyperparams,
    MixtureState,
};
use crate::theta::{residual_covariance, theta_objective, update_theta_all, AdmmState, SamaState};
use crate::tuning::{degrees_of_freedom, hqc_value};

const INIT_RESTARTS: usize = 10;
const INIT_ITERS: usize = 40;
const INIT_RIDGE: f64 = 1e-3;
/// Components with `n_l` below this fraction of `n` are frozen for the step.
const EMPTY_FRACTION: f64 = 1e-8;

/// Ridge coefficients and a diagonal precision from one cluster's moments.
fn cluster_fit(mom: &WeightedMoments) -> Result<GroupParams> {
    let qp1 = mom.c_x.nrows();
    let reg = &mom.c_x + DMatrix::identity(qp1, qp1) * INIT_RIDGE;
    let inv = reg
        .cholesky()
        .ok_or_else(|| Error::NotSpd("ridge system".into()))?
        .inverse();
    let gamma = &mom.c_yx * inv;
    let s = residual_covariance(mom, &gamma);
    let diag = DVector::from_iterator(s.nrows(), s.diagonal().iter().map(|v| 1.0 / (v.max(0.0) + INIT_RIDGE)));
    GroupParams::new(gamma, DMatrix::from_diagonal(&diag))
}

/// Seeded start. One group gets a ridge fit on all samples; otherwise the
/// best of several random-partition runs of a sparse regression mixture
/// with diagonal noise supplies coefficients, precisions and labels. That
/// run discards components too small to estimate, so the returned state
/// may hold fewer than `k` groups.
pub fn initialize(ds: &Dataset, k: usize, seed: u64) -> Result<MixtureState> {
    let n = ds.n();
    if k == 0 || k > n {
        return Err(Error::TooManyGroups { k, n });
    }
    if k == 1 {
        let all = weighted_moments(ds, &vec![1.0; n])?;
        return Ok(MixtureState {
            groups: vec![cluster_fit(&all)?],
            pi: vec![1.0],
            resp: DMatrix::from_element(n, 1, 1.0),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambda = default_lasso_level(ds);
    let start = sparse_mixture_start(ds, k, lambda, INIT_RESTARTS, INIT_ITERS, &mut rng);
    let labels: Vec<usize> = start.resp.row_iter().map(|r| r.transpose().argmax().0).collect();
    let mut groups = Vec::with_capacity(k);
    for (gamma, var) in start.gammas.into_iter().zip(&start.variances) {
        let theta = DMatrix::from_diagonal(&var.map(|v| 1.0 / v));
        groups.push(GroupParams::new(gamma, theta)?);
    }
    let k = groups.len();
    let floor = 1.0 / (10.0 * k as f64);
    let mut pi: Vec<f64> = (0..k)
        .map(|c| (labels.iter().filter(|&&l| l == c).count() as f64 / n as f64).max(floor))
        .collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    let resp = DMatrix::from_fn(n, k, |i, l| if labels[i] == l { 1.0 } else { 0.0 });
    Ok(MixtureState { groups, pi, resp })
}

/// Fitted (pre-merge) mixture together with its trace and diagnostics.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub state: MixtureState,
    pub objective_trace: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

fn relative_change(a: &GroupParams, b: &GroupParams) -> f64 {
    ((&a.gamma - &b.gamma).norm() + (&a.theta - &b.theta).norm())
        / (1.0 + b.gamma.norm() + b.theta.norm())
}

/// Runs the penalized EM from `init` until the relative parameter change
/// falls below `em_tol` or `em_max_iter` iterations have run.
pub fn run_em(ds: &Dataset, hp: &Hyperparams, init: MixtureState) -> Result<EmRun> {
    hp.validate()?;
    let n = ds.n();
    let k = init.k();
    let p = ds.p();
    let mut state = init;
    let mut trace = vec![penalized_objective(ds, &state.groups, &state.pi, hp)?];
    let mut diag = FitDiagnostics::default();
    let mut warm: Option<(AdmmState, SamaState)> = None;

    for iter in 1..=hp.em_max_iter {
        let resp = e_step(ds, &state.groups, &state.pi)?;
        let pi = update_pi(&resp);
        let moments: Vec<Option<WeightedMoments>> = (0..k)
            .map(|l| {
                let w: Vec<f64> = resp.column(l).iter().copied().collect();
                let n_l: f64 = w.iter().sum();
                if n_l < EMPTY_FRACTION * n as f64 {
                    Ok(None)
                } else {
                    weighted_moments(ds, &w).map(Some)
                }
            })
            .collect::<Result<_>>()?;

        let mut ws = LqaWorkspace::new(&state.groups, moments.clone(), n);
        let gammas = update_gamma_all(&mut ws, hp)?;

        let eta = DMatrix::from_fn(k, k, |l, m| (&gammas[l] - &gammas[m]).norm_squared());
        let s_gamma: Vec<DMatrix<f64>> = (0..k)
            .map(|l| match &moments[l] {
                Some(mom) => residual_covariance(mom, &gammas[l]),
                None => DMatrix::zeros(p, p),
            })
            .collect();
        let weights: Vec<f64> = (0..k)
            .map(|l| moments[l].as_ref().map_or(0.0, |m| m.n_l / (2.0 * n as f64)))
            .collect();
        let (mut admm, mut sama) = match warm.take() {
            Some((mut admm, sama)) if hp.admm_warm_start => {
                admm.s_gamma = s_gamma.clone();
                admm.weights = weights.clone();
                admm.eta = eta.clone();
                (admm, sama)
            }
            _ => (
                AdmmState::new(s_gamma.clone(), weights.clone(), eta.clone()),
                SamaState::new(k, p),
            ),
        };
        admm.active = moments.iter().map(Option::is_some).collect();
        for l in 0..k {
            if !admm.active[l] {
                admm.theta[l] = state.groups[l].theta.clone();
                admm.xi[l] = state.groups[l].theta.clone();
                admm.psi[l].fill(0.0);
            }
        }
        let outcome = update_theta_all(&mut admm, &mut sama, hp)?;
        if !outcome.converged {
            diag.admm_capped_steps += 1;
        }
        let current: Vec<DMatrix<f64>> = state.groups.iter().map(|g| g.theta.clone()).collect();
        let f_old = theta_objective(&current, &s_gamma, &weights, &eta, hp);
        let f_new = theta_objective(&admm.xi, &s_gamma, &weights, &eta, hp);
        let thetas = match (f_new, f_old) {
            (Some(new), Some(old)) if new <= old => admm.xi.clone(),
            (Some(_), None) => admm.xi.clone(),
            _ => {
                diag.theta_rejections += 1;
                current
            }
        };
        warm = Some((admm, sama));

        let groups: Vec<GroupParams> = gammas
            .into_iter()
            .zip(thetas)
            .map(|(gamma, theta)| GroupParams { gamma, theta })
            .collect();
        let change = groups
            .iter()
            .zip(&state.groups)
            .map(|(a, b)| relative_change(a, b))
            .fold(0.0, f64::max);
        state = MixtureState { groups, pi, resp };

        let obj = penalized_objective(ds, &state.groups, &state.pi, hp)
            .map_err(|_| Error::NonFiniteObjective { iteration: iter })?;
        if !obj.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iter });
        }
        let last = *trace.last().unwrap_or(&obj);
        diag.max_objective_drop = diag.max_objective_drop.max(last - obj);
        trace.push(obj);
        diag.em_iterations = iter;
        if change < hp.em_tol {
            diag.em_converged = true;
            break;
        }
    }
    state.resp = e_step(ds, &state.groups, &state.pi)?;
    Ok(EmRun {
        state,
        objective_trace: trace,
        diagnostics: diag,
    })
}

/// Default merge threshold: `1e-2 * sqrt(p(q+1) + p^2) * mean|param|`,
/// floored at `1e-4`.
pub fn default_merge_tol(groups: &[GroupParams]) -> f64 {
    let Some(first) = groups.first() else {
        return 1e-4;
    };
    let dim = (first.gamma.len() + first.theta.len()) as f64;
    let total: f64 = groups
        .iter()
        .map(|g| g.gamma.iter().chain(g.theta.iter()).map(|v| v.abs()).sum::<f64>())
        .sum();
    let mean = total / (dim * groups.len() as f64);
    (1e-2 * dim.sqrt() * mean).max(1e-4)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Single-linkage clusters of the groups cut at `tol`, as lists of group
/// indices ordered by their smallest member.
pub fn linkage_clusters(groups: &[GroupParams], tol: f64) -> Vec<Vec<usize>> {
    let k = groups.len();
    let mut parent: Vec<usize> = (0..k).collect();
    for l in 0..k {
        for m in l + 1..k {
            if groups[l].sq_distance(&groups[m]).sqrt() <= tol {
                let (a, b) = (find(&mut parent, l), find(&mut parent, m));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut root_index = vec![usize::MAX; k];
    for l in 0..k {
        let r = find(&mut parent, l);
        if root_index[r] == usize::MAX {
            root_index[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[root_index[r]].push(l);
    }
    clusters
}

/// Merges fused groups and builds the fit summary. Merged clusters whose
/// total weight is below half a sample (`pi < 0.5/n`) are discarded as
/// vanished components. With `lambda2 > 0`, coefficients below `gamma_zero_tol`
/// in magnitude are zeroed (LQA only shrinks them geometrically).
pub fn merge_groups(
    ds: &Dataset,
    run: EmRun,
    hp: &Hyperparams,
) -> Result<FitResult> {
    let state = &run.state;
    let n = ds.n();
    let tol = hp.merge_tol.unwrap_or_else(|| default_merge_tol(&state.groups));
    let clusters = linkage_clusters(&state.groups, tol);

    let min_weight = 0.5 / n as f64;
    let weights: Vec<f64> = clusters
        .iter()
        .map(|c| c.iter().map(|&l| state.pi[l]).sum())
        .collect();
    let keep_all = weights.iter().all(|&w| w < min_weight);

    let mut merged = Vec::new();
    let mut merged_pi = Vec::new();
    let mut members = Vec::new();
    for (cluster, weight) in clusters.into_iter().zip(weights) {
        if weight < min_weight && !keep_all {
            continue;
        }
        let (p, qp1) = state.groups[cluster[0]].gamma.shape();
        let mut gamma = DMatrix::zeros(p, qp1);
        let mut theta = DMatrix::zeros(p, p);
        for &l in &cluster {
            let w = if weight > 0.0 { state.pi[l] / weight } else { 1.0 / cluster.len() as f64 };
            gamma += &state.groups[l].gamma * w;
            theta += &state.groups[l].theta * w;
        }
        gamma.apply(|v| {
            if hp.lambda2 > 0.0 && v.abs() < hp.gamma_zero_tol {
                *v = 0.0;
            }
        });
        crate::likelihood::symmetrize_in_place(&mut theta);
        merged.push(GroupParams { gamma, theta });
        merged_pi.push(weight);
        members.push(cluster);
    }
    let total: f64 = merged_pi.iter().sum();
    merged_pi.iter_mut().for_each(|v| *v /= total);

    let assignment: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for (c, cluster) in members.iter().enumerate() {
                let r: f64 = cluster.iter().map(|&l| state.resp[(i, l)]).sum();
                if r > best_val {
                    best_val = r;
                    best = c;
                }
            }
            best
        })
        .collect();

    let loglik = mixture_loglik(ds, &merged, &merged_pi)?;
    let df: usize = merged.iter().map(degrees_of_freedom).sum();
    let hqc = hqc_value(loglik, df, n).unwrap_or(f64::NAN);
    let edge_sets = merged.iter().map(|g| edge_set(&g.theta)).collect();
    let regulation_sets = merged.iter().map(|g| regulation_set(&g.gamma)).collect();
    Ok(FitResult {
        k_hat: merged.len(),
        merged_groups: merged,
        merged_pi,
        assignment,
        objective_trace: run.objective_trace,
        hqc,
        loglik,
        df,
        edge_sets,
        regulation_sets,
        diagnostics: run.diagnostics,
    })
}

/// Initializes, runs EM and merges.
pub fn fit(ds: &Dataset, hp: &Hyperparams, seed: u64) -> Result<FitResult> {
    hp.validate()?;
    let init = initialize(ds, hp.k, seed)?;
    let run = run_em(ds, hp, init)?;
    merge_groups(ds, run, hp)
}
