//! Domain types shared by the solvers: the paired data set, per-group
//! parameters, the mixture state, hyper-parameters, and fit results.
//!
//! Conventions used throughout the crate:
//!
//! * `q` is the number of raw regulators. The design matrix `X` is
//!   `n x (q+1)` with a leading all-ones intercept column, so every
//!   coefficient matrix is `p x (q+1)`.
//! * Matrices are dense [`nalgebra::DMatrix`] values.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute entrywise tolerance used for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Response matrix `Y` (`n x p`) and design matrix `X` (`n x (q+1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DMatrix<f64>,
    x: DMatrix<f64>,
}

impl Dataset {
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    /// Design matrix including the intercept column.
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Regulators without the intercept column.
    pub fn x_raw(&self) -> DMatrix<f64> {
        self.x.columns(1, self.q()).into_owned()
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols() - 1
    }
}

/// Checks dimensions and finiteness and prepends the intercept column.
pub fn validate_dataset(y: DMatrix<f64>, x_raw: DMatrix<f64>) -> Result<Dataset> {
    if y.nrows() != x_raw.nrows() {
        return Err(Error::RowCountMismatch {
            y_rows: y.nrows(),
            x_rows: x_raw.nrows(),
        });
    }
    let n = y.nrows();
    if n < 2 {
        return Err(Error::TooFewSamples { n, min: 2 });
    }
    if y.ncols() == 0 {
        return Err(Error::Dimension("Y has no columns".into()));
    }
    first_non_finite(&y, "Y")?;
    first_non_finite(&x_raw, "X")?;

    let q = x_raw.ncols();
    let mut x = DMatrix::from_element(n, q + 1, 1.0);
    x.columns_mut(1, q).copy_from(&x_raw);
    Ok(Dataset { y, x })
}

fn first_non_finite(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFiniteEntry {
                    matrix: name,
                    row: i,
                    col: j,
                });
            }
        }
    }
    Ok(())
}

/// True iff `m` is square and symmetric within [`SYMMETRY_TOL`].
pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let p = m.nrows();
    (0..p).all(|j| (j + 1..p).all(|k| (m[(j, k)] - m[(k, j)]).abs() <= SYMMETRY_TOL))
}

/// True iff `theta` is symmetric within [`SYMMETRY_TOL`] and its smallest
/// eigenvalue is strictly positive.
pub fn check_spd(theta: &DMatrix<f64>) -> bool {
    if theta.nrows() == 0 || !is_symmetric(theta) || theta.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let eig = SymmetricEigen::new(theta.clone());
    eig.eigenvalues.iter().all(|&v| v > 0.0)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// One group's coefficient matrix `gamma` (`p x (q+1)`) and precision
/// matrix `theta` (`p x p`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams {
    pub gamma: DMatrix<f64>,
    pub theta: DMatrix<f64>,
}

impl GroupParams {
    /// Builds a group after checking shapes and that `theta` is SPD.
    pub fn new(gamma: DMatrix<f64>, theta: DMatrix<f64>) -> Result<Self> {
        let g = GroupParams { gamma, theta };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.theta.nrows();
        if !self.theta.is_square() || self.gamma.nrows() != p || self.gamma.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "gamma is {}x{}, theta is {}x{}",
                self.gamma.nrows(),
                self.gamma.ncols(),
                self.theta.nrows(),
                self.theta.ncols()
            )));
        }
        if !check_spd(&self.theta) {
            return Err(Error::NotSpd("group precision matrix".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.theta.nrows()
    }

    /// Number of raw regulators (`gamma` has `q+1` columns).
    pub fn q(&self) -> usize {
        self.gamma.ncols() - 1
    }

    /// Row-major `gamma` entries followed by row-major `theta` entries.
    pub fn vectorize(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.gamma.len() + self.theta.len());
        for j in 0..self.gamma.nrows() {
            out.extend(self.gamma.row(j).iter());
        }
        for j in 0..self.theta.nrows() {
            out.extend(self.theta.row(j).iter());
        }
        out
    }

    /// Inverse of [`GroupParams::vectorize`].
    pub fn devectorize(p: usize, q: usize, values: &[f64]) -> Result<Self> {
        let ng = p * (q + 1);
        if values.len() != ng + p * p {
            return Err(Error::Dimension(format!(
                "expected {} values for p={p}, q={q}, got {}",
                ng + p * p,
                values.len()
            )));
        }
        let gamma = DMatrix::from_row_slice(p, q + 1, &values[..ng]);
        let theta = DMatrix::from_row_slice(p, p, &values[ng..]);
        GroupParams::new(gamma, theta)
    }

    /// Squared distance `||dTheta||_F^2 + ||dGamma||_F^2` used by the fusion
    /// penalty and by group matching.
    pub fn sq_distance(&self, other: &GroupParams) -> f64 {
        (&self.theta - &other.theta).norm_squared() + (&self.gamma - &other.gamma).norm_squared()
    }
}

/// Parameters of all `K` components, mixture weights and responsibilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState {
    pub groups: Vec<GroupParams>,
    pub pi: Vec<f64>,
    /// `n x K` matrix of posterior membership probabilities.
    pub resp: DMatrix<f64>,
}

impl MixtureState {
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.groups.len();
        if self.pi.len() != k || self.resp.ncols() != k {
            return Err(Error::Dimension(format!(
                "{} groups, {} weights, {} responsibility columns",
                k,
                self.pi.len(),
                self.resp.ncols()
            )));
        }
        let total: f64 = self.pi.iter().sum();
        if self.pi.iter().any(|&v| v < 0.0) || (total - 1.0).abs() > 1e-10 {
            return Err(Error::Dimension("mixture weights are not a probability vector".into()));
        }
        for row in self.resp.row_iter() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Dimension("responsibility row is not a distribution".into()));
            }
        }
        for g in &self.groups {
            g.validate()?;
        }
        Ok(())
    }
}

/// Visiting rule for the coefficient sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    /// Every coordinate reads the previous sweep's values.
    Jacobi,
    /// Cyclic coordinate descent reading the freshest values.
    #[default]
    GaussSeidel,
}

/// Penalty levels, MCP shape, solver parameters and tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Off-diagonal precision sparsity.
    pub lambda1: f64,
    /// Coefficient sparsity.
    pub lambda2: f64,
    /// Pairwise fusion of group parameters.
    pub lambda3: f64,
    /// MCP concavity.
    pub a: f64,
    /// ADMM penalty for the precision split.
    pub kappa: f64,
    /// Step for the fusion block of the inner solver. Must exceed `1/a`; the
    /// dual iteration needs roughly `kappa_prime < 2 kappa / k` to settle.
    pub kappa_prime: f64,
    /// Upper bound on the number of groups.
    pub k: usize,
    pub em_tol: f64,
    pub admm_tol: f64,
    pub sama_tol: f64,
    pub em_max_iter: usize,
    pub admm_max_iter: usize,
    pub sama_max_iter: usize,
    /// Floor for LQA denominators; coefficients below it are locked at zero.
    pub lqa_floor: f64,
    /// Single-linkage cut for merging groups; `None` selects a scale-aware default.
    pub merge_tol: Option<f64>,
    /// Coefficient sweeps per M-step.
    pub gamma_sweeps: usize,
    pub gamma_sweep_order: SweepOrder,
    /// Carry the ADMM iterates from one M-step to the next.
    pub admm_warm_start: bool,
    /// With `lambda2 > 0`, reported coefficients with magnitude below this
    /// are set to zero.
    pub gamma_zero_tol: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            a: 3.0,
            kappa: 1.0,
            kappa_prime: 0.35,
            k: 6,
            em_tol: 1e-3,
            admm_tol: 1e-4,
            sama_tol: 1e-4,
            em_max_iter: 100,
            admm_max_iter: 500,
            sama_max_iter: 50,
            lqa_floor: 1e-6,
            merge_tol: None,
            gamma_sweeps: 1,
            gamma_sweep_order: SweepOrder::GaussSeidel,
            admm_warm_start: true,
            gamma_zero_tol: 1e-3,
        }
    }
}

impl Hyperparams {
    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self.lambda3 = lambda3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidHyperparams(msg));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.a > 1.0) {
            return bad(format!("a must exceed 1, got {}", self.a));
        }
        if !(self.kappa > 0.0 && self.kappa_prime > 0.0) {
            return bad("kappa and kappa_prime must be positive".into());
        }
        if self.a * self.kappa <= 1.0 || self.a * self.kappa_prime <= 1.0 {
            return bad("a*kappa and a*kappa_prime must exceed 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        for (name, v) in [
            ("em_tol", self.em_tol),
            ("admm_tol", self.admm_tol),
            ("sama_tol", self.sama_tol),
            ("lqa_floor", self.lqa_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.em_max_iter == 0 || self.admm_max_iter == 0 || self.sama_max_iter == 0 {
            return bad("iteration caps must be positive".into());
        }
        if self.gamma_sweeps == 0 {
            return bad("gamma_sweeps must be positive".into());
        }
        if !(self.gamma_zero_tol >= 0.0 && self.gamma_zero_tol.is_finite()) {
            return bad(format!("gamma_zero_tol must be nonnegative, got {}", self.gamma_zero_tol));
        }
        if let Some(t) = self.merge_tol {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("merge_tol must be nonnegative, got {t}"));
            }
        }
        Ok(())
    }
}

/// Convergence bookkeeping for one fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub em_iterations: usize,
    pub em_converged: bool,
    /// M-steps whose precision ADMM hit `admm_max_iter`.
    pub admm_capped_steps: usize,
    /// M-steps where the precision candidate was rejected and the previous
    /// iterate kept.
    pub theta_rejections: usize,
    /// Largest single-iteration drop of the penalized objective.
    pub max_objective_drop: f64,
}

/// Estimates after merging fused groups.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub merged_groups: Vec<GroupParams>,
    pub merged_pi: Vec<f64>,
    /// Merged group index per sample (argmax of merged responsibilities).
    pub assignment: Vec<usize>,
    pub k_hat: usize,
    pub objective_trace: Vec<f64>,
    pub hqc: f64,
    /// Mixture log-likelihood summed over samples under the merged groups.
    pub loglik: f64,
    /// Total nonzero parameter count across merged groups.
    pub df: usize,
    /// Per merged group, ordered pairs `(j, m)`, `j != m`, with nonzero precision entry.
    pub edge_sets: Vec<Vec<(usize, usize)>>,
    /// Per merged group, pairs `(j, m)` with nonzero coefficient.
    pub regulation_sets: Vec<Vec<(usize, usize)>>,
    pub diagnostics: FitDiagnostics,
}

/// Nonzero off-diagonal pattern of a precision matrix, both orientations.
pub fn edge_set(theta: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let p = theta.nrows();
    let mut out = Vec::new();
    for j in 0..p {
        for m in 0..p {
            if j != m && theta[(j, m)] != 0.0 {
                out.push((j, m));
            }
        }
    }
    out
}

/// Nonzero pattern of a coefficient matrix.
pub fn regulation_set(gamma: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..gamma.nrows() {
        for m in 0..gamma.ncols() {
            if gamma[(j, m)] != 0.0 {
                out.push((j, m));
            }
        }
    }
    out
}
