//! Conditional Gaussian densities, the mixture log-likelihood, the penalized
//! objective, and the E-step.
//!
//! All density work is done in log space through a Cholesky factor of each
//! precision matrix, and responsibilities are normalized with log-sum-exp.
//!
//! The penalty counts every ordered off-diagonal pair `(j, m)`, `j != m`, of a
//! precision matrix, so each symmetric edge contributes twice.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{Dataset, GroupParams, Hyperparams};
use crate::penalty::McpSpec;
use crate::theta::residual_covariance;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Weighted second moments of one component.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMoments {
    /// `p x p`
    pub c_y: DMatrix<f64>,
    /// `p x (q+1)`
    pub c_yx: DMatrix<f64>,
    /// `(q+1) x (q+1)`
    pub c_x: DMatrix<f64>,
    /// Effective component size `sum_i L_il`.
    pub n_l: f64,
}

fn cholesky(theta: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(theta.clone()).ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))
}

/// `log f(y; x, gamma, theta)` for one observation.
pub fn log_cond_density(y: &[f64], x: &[f64], g: &GroupParams) -> Result<f64> {
    let p = g.p();
    if y.len() != p || x.len() != g.gamma.ncols() {
        return Err(Error::Dimension(format!(
            "y has {} entries and x {}, group expects {} and {}",
            y.len(),
            x.len(),
            p,
            g.gamma.ncols()
        )));
    }
    let chol = cholesky(&g.theta)?;
    let l = chol.l();
    let resid = DVector::from_column_slice(y) - &g.gamma * DVector::from_column_slice(x);
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = (l.transpose() * resid).norm_squared();
    Ok(-0.5 * p as f64 * LN_2PI + 0.5 * log_det - 0.5 * quad)
}

/// `n x K` matrix of `log f_l(y_i; x_i)`.
pub fn log_density_matrix(ds: &Dataset, groups: &[GroupParams]) -> Result<DMatrix<f64>> {
    let n = ds.n();
    let p = ds.p() as f64;
    let mut out = DMatrix::zeros(n, groups.len());
    for (l, g) in groups.iter().enumerate() {
        let chol = cholesky(&g.theta)?;
        let factor = chol.l();
        let log_det: f64 = 2.0 * factor.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        // Row i of R*L is (L^T r_i)^T, whose squared norm is r_i^T Theta r_i.
        let resid = ds.y() - ds.x() * g.gamma.transpose();
        let whitened = resid * factor;
        let base = -0.5 * p * LN_2PI + 0.5 * log_det;
        for i in 0..n {
            out[(i, l)] = base - 0.5 * whitened.row(i).norm_squared();
        }
    }
    Ok(out)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Responsibilities from per-group log densities and mixture weights.
pub fn responsibilities(log_dens: &DMatrix<f64>, pi: &[f64]) -> Result<DMatrix<f64>> {
    let (n, k) = log_dens.shape();
    let log_pi: Vec<f64> = pi.iter().map(|v| v.ln()).collect();
    let mut resp = DMatrix::zeros(n, k);
    for i in 0..n {
        let row = (0..k).map(|l| log_pi[l] + log_dens[(i, l)]);
        let lse = log_sum_exp(row.clone());
        if !lse.is_finite() {
            return Err(Error::NonFinite(format!("mixture density of sample {i}")));
        }
        let mut total = 0.0;
        for (l, v) in row.enumerate() {
            let r = (v - lse).exp();
            resp[(i, l)] = r;
            total += r;
        }
        for l in 0..k {
            resp[(i, l)] /= total;
        }
    }
    Ok(resp)
}

/// Posterior membership probabilities `L_il`.
pub fn e_step(ds: &Dataset, groups: &[GroupParams], pi: &[f64]) -> Result<DMatrix<f64>> {
    responsibilities(&log_density_matrix(ds, groups)?, pi)
}

/// Column means of the responsibility matrix.
pub fn update_pi(resp: &DMatrix<f64>) -> Vec<f64> {
    let n = resp.nrows() as f64;
    resp.column_iter().map(|c| c.sum() / n).collect()
}

/// Weighted second moments normalized by `n_l = sum(weights)`.
pub fn weighted_moments(ds: &Dataset, weights: &[f64]) -> Result<WeightedMoments> {
    let n = ds.n();
    if weights.len() != n {
        return Err(Error::Dimension(format!(
            "{} weights for {} samples",
            weights.len(),
            n
        )));
    }
    let n_l: f64 = weights.iter().sum();
    if !(n_l > f64::EPSILON * n as f64) {
        return Err(Error::EmptyComponent {
            component: 0,
            size: n_l,
        });
    }
    let mut wy = ds.y().clone();
    let mut wx = ds.x().clone();
    for (i, &w) in weights.iter().enumerate() {
        wy.row_mut(i).scale_mut(w);
        wx.row_mut(i).scale_mut(w);
    }
    let mut c_y = wy.transpose() * ds.y() / n_l;
    let c_yx = wy.transpose() * ds.x() / n_l;
    let mut c_x = wx.transpose() * ds.x() / n_l;
    symmetrize_in_place(&mut c_y);
    symmetrize_in_place(&mut c_x);
    Ok(WeightedMoments { c_y, c_yx, c_x, n_l })
}

pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for j in 0..p {
        for k in j + 1..p {
            let v = 0.5 * (m[(j, k)] + m[(k, j)]);
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
}

/// `sum_i log sum_l pi_l f_l(y_i; x_i)`.
pub fn mixture_loglik(ds: &Dataset, groups: &[GroupParams], pi: &[f64]) -> Result<f64> {
    let log_dens = log_density_matrix(ds, groups)?;
    let log_pi: Vec<f64> = pi.iter().map(|v| v.ln()).collect();
    let mut total = 0.0;
    for i in 0..ds.n() {
        total += log_sum_exp((0..groups.len()).map(|l| log_pi[l] + log_dens[(i, l)]));
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("mixture log-likelihood".into()));
    }
    Ok(total)
}

/// Sparsity plus fusion penalty on all groups.
pub fn penalty_value(groups: &[GroupParams], hp: &Hyperparams) -> f64 {
    let s1 = McpSpec::new(hp.lambda1, hp.a);
    let s2 = McpSpec::new(hp.lambda2, hp.a);
    let s3 = McpSpec::new(hp.lambda3, hp.a);
    let mut total = 0.0;
    for g in groups {
        let p = g.p();
        for j in 0..p {
            for m in 0..p {
                if j != m {
                    total += s1.value_abs(g.theta[(j, m)]);
                }
            }
        }
        total += g.gamma.iter().map(|&v| s2.value_abs(v)).sum::<f64>();
    }
    for l in 0..groups.len() {
        for k in l + 1..groups.len() {
            total += s3.value_abs(groups[l].sq_distance(&groups[k]).sqrt());
        }
    }
    total
}

/// Mean mixture log-likelihood minus the penalty.
pub fn penalized_objective(
    ds: &Dataset,
    groups: &[GroupParams],
    pi: &[f64],
    hp: &Hyperparams,
) -> Result<f64> {
    Ok(mixture_loglik(ds, groups, pi)? / ds.n() as f64 - penalty_value(groups, hp))
}

/// Expected complete-data log-likelihood
/// `(1/n) sum_i sum_l L_il [log pi_l + log f_l(y_i; x_i)]`.
pub fn expected_complete_loglik(
    ds: &Dataset,
    resp: &DMatrix<f64>,
    groups: &[GroupParams],
    pi: &[f64],
) -> Result<f64> {
    let log_dens = log_density_matrix(ds, groups)?;
    let mut total = 0.0;
    for i in 0..ds.n() {
        for l in 0..groups.len() {
            let w = resp[(i, l)];
            if w > 0.0 {
                total += w * (pi[l].ln() + log_dens[(i, l)]);
            }
        }
    }
    Ok(total / ds.n() as f64)
}

/// Gradient of the expected complete-data log-likelihood with respect to
/// one group's coefficients: `(n_l/n) Theta (C_yx - Gamma C_x)`.
pub fn complete_loglik_grad_gamma(mom: &WeightedMoments, g: &GroupParams, n: usize) -> DMatrix<f64> {
    (&g.theta * (&mom.c_yx - &g.gamma * &mom.c_x)) * (mom.n_l / n as f64)
}

/// Gradient with respect to one group's precision matrix, treating its
/// entries as free: `(n_l/(2n)) (Theta^{-1} - S_Gamma)`.
pub fn complete_loglik_grad_theta(
    mom: &WeightedMoments,
    g: &GroupParams,
    n: usize,
) -> Result<DMatrix<f64>> {
    let inv = cholesky(&g.theta)?.inverse();
    let s = residual_covariance(mom, &g.gamma);
    Ok((inv - s) * (mom.n_l / (2.0 * n as f64)))
}
