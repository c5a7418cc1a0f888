//! Starting values from a mixture of sparse linear regressions with
//! diagonal noise, fitted by a short EM from several random partitions.
//!
//! Each component's coefficients get a lasso penalty on the regulator
//! columns (the intercept is free) and are updated by coordinate descent on
//! the weighted moments. The restart with the largest penalized
//! log-likelihood wins.
//!
//! A component whose effective size drops below [`min_component_size`] is
//! removed and its samples are shared among the rest, so a start may hold
//! fewer components than requested.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::Dataset;
use crate::penalty::soft_threshold;

const CD_SWEEPS: usize = 5;
const VARIANCE_FLOOR: f64 = 1e-3;

/// Winning restart: responsibilities, coefficients (`p x (q+1)`) and noise
/// variances per component.
pub(crate) struct SparseStart {
    pub resp: DMatrix<f64>,
    pub gammas: Vec<DMatrix<f64>>,
    pub variances: Vec<DVector<f64>>,
}

/// Lasso level used when none is given: a quarter of the root mean square
/// of the response standard deviations.
pub(crate) fn default_lasso_level(ds: &Dataset) -> f64 {
    let n = ds.n() as f64;
    let mean_var = ds
        .y()
        .column_iter()
        .map(|c| {
            let mu = c.mean();
            c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / ds.p() as f64;
    0.25 * mean_var.sqrt()
}

/// Fewest samples that still identify a component's own coefficients and
/// covariance: `max(p, q + 1) + 1`.
pub(crate) fn min_component_size(ds: &Dataset) -> f64 {
    (ds.p().max(ds.q() + 1) + 1) as f64
}

struct Component {
    /// `(q+1) x p`, one column per response.
    coef: DMatrix<f64>,
    var: DVector<f64>,
}

fn lasso_update(comp: &mut Component, ds: &Dataset, w: &[f64], lambda: f64) -> bool {
    let n_k: f64 = w.iter().sum();
    if n_k < 1e-8 * ds.n() as f64 {
        return false;
    }
    let mut wx = ds.x().clone();
    for (i, &wi) in w.iter().enumerate() {
        wx.row_mut(i).scale_mut(wi);
    }
    let c_x = wx.transpose() * ds.x() / n_k;
    let c_xy = wx.transpose() * ds.y() / n_k;
    let d = c_x.nrows();
    let b = &mut comp.coef;
    for _ in 0..CD_SWEEPS {
        for m in 0..d {
            let cmm = c_x[(m, m)];
            let fitted = c_x.row(m) * &*b;
            for j in 0..b.ncols() {
                let r = c_xy[(m, j)] - fitted[(0, j)] + cmm * b[(m, j)];
                b[(m, j)] = if cmm > 0.0 {
                    let t = if m == 0 { 0.0 } else { lambda };
                    soft_threshold(r, t) / cmm
                } else {
                    0.0
                };
            }
        }
    }
    let resid = ds.y() - ds.x() * &*b;
    for j in 0..resid.ncols() {
        let ss: f64 = resid.column(j).iter().zip(w).map(|(r, wi)| wi * r * r).sum();
        comp.var[j] = ss / n_k + VARIANCE_FLOOR;
    }
    true
}

/// Log densities `log pi_k + log N(y_i; B_k^T x_i, diag(var_k))` up to a constant.
fn log_weights(ds: &Dataset, comps: &[Component], pi: &[f64]) -> DMatrix<f64> {
    let n = ds.n();
    let mut out = DMatrix::zeros(n, comps.len());
    for (k, c) in comps.iter().enumerate() {
        let resid = ds.y() - ds.x() * &c.coef;
        let log_det: f64 = c.var.iter().map(|v| v.ln()).sum();
        for i in 0..n {
            let quad: f64 = resid.row(i).iter().zip(c.var.iter()).map(|(r, v)| r * r / v).sum();
            out[(i, k)] = pi[k].max(f64::MIN_POSITIVE).ln() - 0.5 * (log_det + quad);
        }
    }
    out
}

/// Normalizes rows in place and returns the summed log normalizers.
fn normalize_rows(lw: &mut DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for mut row in lw.row_iter_mut() {
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.apply(|v| *v = (*v - lse).exp());
        total += lse;
    }
    total
}

/// Drops components below `min_size` (always keeping the largest) and
/// renormalizes the responsibilities.
fn prune(resp: &mut DMatrix<f64>, comps: &mut Vec<Component>, min_size: f64) {
    let sizes: Vec<f64> = resp.column_iter().map(|c| c.sum()).collect();
    let largest = (0..sizes.len()).fold(0, |b, c| if sizes[c] > sizes[b] { c } else { b });
    let keep: Vec<usize> = (0..sizes.len())
        .filter(|&c| c == largest || sizes[c] >= min_size)
        .collect();
    if keep.len() == sizes.len() {
        return;
    }
    let mut kept = resp.select_columns(&keep);
    for mut row in kept.row_iter_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row.fill(1.0 / keep.len() as f64);
        }
    }
    *resp = kept;
    let mut idx = 0;
    comps.retain(|_| {
        idx += 1;
        keep.contains(&(idx - 1))
    });
}

fn one_start(
    ds: &Dataset,
    k: usize,
    lambda: f64,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> (SparseStart, f64) {
    let n = ds.n();
    let (p, d) = (ds.p(), ds.q() + 1);
    let mut resp = DMatrix::from_element(n, k, 0.1 / k as f64);
    for i in 0..n {
        resp[(i, rng.gen_range(0..k))] += 0.9;
    }
    let mut comps: Vec<Component> = (0..k)
        .map(|_| Component {
            coef: DMatrix::zeros(d, p),
            var: DVector::from_element(p, 1.0),
        })
        .collect();
    let mut score = f64::NEG_INFINITY;
    for _ in 0..iters {
        let pi: Vec<f64> = resp
            .column_iter().map(|c| c.sum() / n as f64).collect();
        for (c, comp) in comps.iter_mut().enumerate() {
            let w: Vec<f64> = resp.column(c).iter().copied().collect();
            lasso_update(comp, ds, &w, lambda);
        }
        let mut lw = log_weights(ds, &comps, &pi);
        let loglik = normalize_rows(&mut lw);
        let l1: f64 = comps
            .iter()
            .map(|c| c.coef.rows(1, d - 1).iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        score = loglik - n as f64 * lambda * l1;
        resp = lw;
        prune(&mut resp, &mut comps, min_component_size(ds));
    }
    let start = SparseStart {
        resp,
        gammas: comps.iter().map(|c| c.coef.transpose()).collect(),
        variances: comps.into_iter().map(|c| c.var).collect(),
    };
    (start, score)
}

/// Best of `restarts` random-partition starts.
pub(crate) fn sparse_mixture_start(
    ds: &Dataset,
    k: usize,
    lambda: f64,
    restarts: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> SparseStart {
    let mut best: Option<(SparseStart, f64)> = None;
    for _ in 0..restarts.max(1) {
        let (start, score) = one_start(ds, k, lambda, iters, rng);
        if best.as_ref().map_or(true, |b| score > b.1) {
            best = Some((start, score));
        }
    }
    best.expect("at least one restart").0
}
