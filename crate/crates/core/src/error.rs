use thiserror::Error;

/// Errors raised by the estimators and their numerical kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite after adding ridge {ridge:e}")]
    NotPositiveDefinite { ridge: f64 },

    #[error("{0} did not converge")]
    NoConvergence(&'static str),

    #[error("numerically zero matrix")]
    NumericallyZero,

    #[error("requested subspace dimension {requested} exceeds numerical rank {achieved}")]
    RankDeficient { requested: usize, achieved: usize },

    #[error("kernel or regularization mismatch: {0}")]
    KernelMismatch(String),

    #[error("split fitting needs an even number of samples, got {0}")]
    OddSampleCount(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("world generation failed: {0}")]
    Generation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
