//! Precision-matrix step: ADMM splitting `Theta = Xi`, with an S-AMA inner
//! loop for the sparsity-plus-fusion proximal problem in `Xi`.
//!
//! The smooth part for group `l` is `w_l [-log det Theta_l + tr(S_l Theta_l)]`
//! where `w_l` is the group's likelihood weight (the EM driver passes
//! `n_l / (2n)`, which keeps it on the scale of the penalized objective).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::likelihood::{symmetrize_in_place, WeightedMoments};
use crate::model::{check_spd, Hyperparams};
use crate::penalty::{group_prox_radius, mcp_prox_unchecked, McpSpec};

/// Primal, split and dual iterates of the ADMM.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub theta: Vec<DMatrix<f64>>,
    pub xi: Vec<DMatrix<f64>>,
    /// Scaled duals for `Theta_l = Xi_l`.
    pub psi: Vec<DMatrix<f64>>,
    pub s_gamma: Vec<DMatrix<f64>>,
    /// Likelihood weights `w_l`.
    pub weights: Vec<f64>,
    /// `eta[(l, l')] = ||Gamma_l - Gamma_l'||_F^2`.
    pub eta: DMatrix<f64>,
    /// Groups excluded from the update (emptied components keep their values).
    pub active: Vec<bool>,
}

impl AdmmState {
    /// Cold start: `Theta = I`, `Xi = Psi = 0`.
    pub fn new(s_gamma: Vec<DMatrix<f64>>, weights: Vec<f64>, eta: DMatrix<f64>) -> Self {
        let k = s_gamma.len();
        let p = s_gamma.first().map_or(0, |s| s.nrows());
        AdmmState {
            theta: vec![DMatrix::identity(p, p); k],
            xi: vec![DMatrix::zeros(p, p); k],
            psi: vec![DMatrix::zeros(p, p); k],
            s_gamma,
            weights,
            eta,
            active: vec![true; k],
        }
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }
}

/// Edge variables and duals of the S-AMA, one entry per pair `l < l'`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamaState {
    pub edges: Vec<(usize, usize)>,
    pub v: Vec<DMatrix<f64>>,
    pub delta: Vec<DMatrix<f64>>,
}

impl SamaState {
    pub fn new(k: usize, p: usize) -> Self {
        let edges: Vec<(usize, usize)> = (0..k)
            .flat_map(|l| (l + 1..k).map(move |m| (l, m)))
            .collect();
        let e = edges.len();
        SamaState {
            edges,
            v: vec![DMatrix::zeros(p, p); e],
            delta: vec![DMatrix::zeros(p, p); e],
        }
    }
}

/// Outcome of one call to [`update_theta_all`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdmmOutcome {
    pub iterations: usize,
    pub converged: bool,
}

/// `S = C_y - C_yx Gamma^T - Gamma C_yx^T + Gamma C_x Gamma^T`, symmetrized.
pub fn residual_covariance(mom: &WeightedMoments, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let cross = &mom.c_yx * gamma.transpose();
    let mut s = &mom.c_y - &cross - cross.transpose() + gamma * &mom.c_x * gamma.transpose();
    symmetrize_in_place(&mut s);
    s
}

/// Closed-form minimizer of
/// `w [-log det T + tr(S T)] + (kappa/2) ||T - Xi + Psi||_F^2`.
pub fn theta_eigen_update(
    s_gamma: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    weight: f64,
    kappa: f64,
) -> Result<DMatrix<f64>> {
    let mut m = s_gamma + (psi - xi) * (kappa / weight);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("precision eigen-update input".into()));
    }
    symmetrize_in_place(&mut m);
    let eig = SymmetricEigen::new(m);
    let d = eig
        .eigenvalues
        .map(|d| weight * (-d + (d * d + 4.0 * kappa / weight).sqrt()) / (2.0 * kappa));
    let u = &eig.eigenvectors;
    Ok(u * DMatrix::from_diagonal(&d) * u.transpose())
}

/// Replaces each off-diagonal pair by the member of smaller magnitude.
pub fn symmetrize_min_magnitude(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = theta.clone();
    let p = theta.nrows();
    for j in 0..p {
        for m in j + 1..p {
            let (a, b) = (theta[(j, m)], theta[(m, j)]);
            let keep = if b.abs() < a.abs() { b } else { a };
            out[(j, m)] = keep;
            out[(m, j)] = keep;
        }
    }
    out
}

/// `Xi` block of the S-AMA: elementwise MCP prox of
/// `u_l = z_l + sum_r delta_r (e_l - e_l') / kappa` on off-diagonal entries.
pub fn sama_xi_update(
    z: &[DMatrix<f64>],
    sama: &SamaState,
    hp: &Hyperparams,
) -> Result<Vec<DMatrix<f64>>> {
    if hp.a * hp.kappa <= 1.0 {
        return Err(Error::ProxNotConvex {
            a: hp.a,
            kappa: hp.kappa,
        });
    }
    let mut u: Vec<DMatrix<f64>> = z.to_vec();
    for (&(l, m), d) in sama.edges.iter().zip(&sama.delta) {
        u[l] += d / hp.kappa;
        u[m] -= d / hp.kappa;
    }
    for x in u.iter_mut() {
        let p = x.nrows();
        for j in 0..p {
            for m in j + 1..p {
                let avg = 0.5 * (x[(j, m)] + x[(m, j)]);
                let v = mcp_prox_unchecked(avg, hp.lambda1, hp.a, hp.kappa);
                x[(j, m)] = v;
                x[(m, j)] = v;
            }
        }
    }
    Ok(u)
}

/// `V` block: group-MCP prox of `w_r = Xi_l - Xi_l' - delta_r / kappa'` with
/// the coefficient-distance offset `eta_r` inside the penalty.
pub fn sama_v_update(
    xi: &[DMatrix<f64>],
    sama: &mut SamaState,
    eta: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<()> {
    if hp.a * hp.kappa_prime <= 1.0 {
        return Err(Error::ProxNotConvex {
            a: hp.a,
            kappa: hp.kappa_prime,
        });
    }
    for r in 0..sama.edges.len() {
        let (l, m) = sama.edges[r];
        let w = &xi[l] - &xi[m] - &sama.delta[r] / hp.kappa_prime;
        let norm = w.norm();
        let radius = group_prox_radius(norm, eta[(l, m)], hp.lambda3, hp.a, hp.kappa_prime);
        sama.v[r] = if norm > 0.0 { w * (radius / norm) } else { w };
    }
    Ok(())
}

/// Dual ascent `delta_r += kappa' (v_r - Xi_l + Xi_l')` on every edge.
pub fn sama_delta_update(sama: &mut SamaState, xi: &[DMatrix<f64>], kappa_prime: f64) {
    for r in 0..sama.edges.len() {
        let (l, m) = sama.edges[r];
        let step = (&sama.v[r] - &xi[l] + &xi[m]) * kappa_prime;
        sama.delta[r] += step;
    }
}

/// Runs the S-AMA for the prox problem centred at `z`. Edges touching an
/// inactive group carry no dual and inactive groups keep `fixed[l]`.
fn sama_solve(
    z: &[DMatrix<f64>],
    fixed: &[DMatrix<f64>],
    active: &[bool],
    sama: &mut SamaState,
    eta: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Result<Vec<DMatrix<f64>>> {
    for (r, &(l, m)) in sama.edges.iter().enumerate() {
        if !(active[l] && active[m]) {
            sama.delta[r].fill(0.0);
        }
    }
    let mut xi = Vec::new();
    for _ in 0..hp.sama_max_iter {
        xi = sama_xi_update(z, sama, hp)?;
        for l in 0..xi.len() {
            if !active[l] {
                xi[l].copy_from(&fixed[l]);
            }
        }
        let old_v = sama.v.clone();
        sama_v_update(&xi, sama, eta, hp)?;
        sama_delta_update(sama, &xi, hp.kappa_prime);
        for (r, &(l, m)) in sama.edges.iter().enumerate() {
            if !(active[l] && active[m]) {
                sama.delta[r].fill(0.0);
            }
        }
        let change = sama
            .v
            .iter()
            .zip(&old_v)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        if change < hp.sama_tol {
            break;
        }
    }
    Ok(xi)
}

/// ADMM sweep until every active group's relative change in `Theta`, and its
/// relative primal residual `||Theta - Xi||`, fall below `admm_tol`.
///
/// On return `admm.xi` holds the sparse estimates. Hitting the iteration cap
/// is reported through the outcome, not as an error.
pub fn update_theta_all(
    admm: &mut AdmmState,
    sama: &mut SamaState,
    hp: &Hyperparams,
) -> Result<AdmmOutcome> {
    let k = admm.k();
    let fixed = admm.theta.clone();
    for iter in 1..=hp.admm_max_iter {
        let mut max_change: f64 = 0.0;
        for l in 0..k {
            if !admm.active[l] {
                continue;
            }
            let next = symmetrize_min_magnitude(&theta_eigen_update(
                &admm.s_gamma[l],
                &admm.xi[l],
                &admm.psi[l],
                admm.weights[l],
                hp.kappa,
            )?);
            let prev_norm = admm.theta[l].norm().max(f64::MIN_POSITIVE);
            max_change = max_change.max((&next - &admm.theta[l]).norm() / prev_norm);
            admm.theta[l] = next;
        }
        let z: Vec<DMatrix<f64>> = (0..k).map(|l| &admm.theta[l] + &admm.psi[l]).collect();
        let xi = sama_solve(&z, &fixed, &admm.active, sama, &admm.eta, hp)?;
        let mut max_resid: f64 = 0.0;
        for l in 0..k {
            if !admm.active[l] {
                admm.xi[l].copy_from(&fixed[l]);
                continue;
            }
            let resid = &admm.theta[l] - &xi[l];
            max_resid = max_resid.max(resid.norm() / admm.theta[l].norm());
            admm.psi[l] += resid;
        }
        for l in 0..k {
            if admm.active[l] {
                admm.xi[l] = xi[l].clone();
            }
        }
        if max_change < hp.admm_tol && max_resid < hp.admm_tol {
            return Ok(AdmmOutcome {
                iterations: iter,
                converged: true,
            });
        }
    }
    Ok(AdmmOutcome {
        iterations: hp.admm_max_iter,
        converged: false,
    })
}

/// Objective of the precision step at candidate `thetas` (lower is better).
/// Returns `None` if any candidate is not SPD.
pub fn theta_objective(
    thetas: &[DMatrix<f64>],
    s_gamma: &[DMatrix<f64>],
    weights: &[f64],
    eta: &DMatrix<f64>,
    hp: &Hyperparams,
) -> Option<f64> {
    let s1 = McpSpec::new(hp.lambda1, hp.a);
    let s3 = McpSpec::new(hp.lambda3, hp.a);
    let mut total = 0.0;
    for (l, t) in thetas.iter().enumerate() {
        if !check_spd(t) {
            return None;
        }
        let chol = nalgebra::Cholesky::new(t.clone())?;
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let trace = t.component_mul(&s_gamma[l]).sum();
        total += weights[l] * (-log_det + trace);
        let p = t.nrows();
        for j in 0..p {
            for m in 0..p {
                if j != m {
                    total += s1.value_abs(t[(j, m)]);
                }
            }
        }
    }
    for l in 0..thetas.len() {
        for m in l + 1..thetas.len() {
            let d2 = (&thetas[l] - &thetas[m]).norm_squared() + eta[(l, m)];
            total += s3.value_abs(d2.sqrt());
        }
    }
    Some(total)
}
