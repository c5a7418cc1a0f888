use thiserror::Error;

/// Errors raised by validation and the estimation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("row count mismatch: Y has {y_rows} rows, X has {x_rows}")]
    RowCountMismatch { y_rows: usize, x_rows: usize },

    #[error("non-finite entry at ({row},{col}) in {matrix}")]
    NonFiniteEntry {
        matrix: &'static str,
        row: usize,
        col: usize,
    },

    #[error("need at least {min} samples, got {n}")]
    TooFewSamples { n: usize, min: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),

    #[error("penalty argument must be nonnegative, got {0}")]
    NegativeArgument(f64),

    #[error("MCP proximal map needs a*kappa > 1 (a={a}, kappa={kappa})")]
    ProxNotConvex { a: f64, kappa: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("component {component} is empty (effective size {size:e})")]
    EmptyComponent { component: usize, size: f64 },

    #[error("non-finite penalized objective at EM iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("cannot form {k} groups from {n} samples")]
    TooManyGroups { k: usize, n: usize },

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("label length mismatch: {left} vs {right}")]
    LabelLengthMismatch { left: usize, right: usize },

    #[error("tuning grid is empty")]
    EmptyGrid,

    #[error("all {count} grid fits failed: {details}")]
    AllFitsFailed { count: usize, details: String },
}

pub type Result<T> = std::result::Result<T, Error>;
