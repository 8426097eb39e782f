use thiserror::Error;

/// Errors raised by problem construction, the solvers and the experiment driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{0} is not symmetric")]
    Asymmetric(&'static str),

    #[error("{0} is not positive semidefinite")]
    NonPsd(&'static str),

    #[error("{0} is not positive definite")]
    NonPd(&'static str),

    #[error("diffusion matrix sigma is singular")]
    SingularSigma,

    #[error("empirical covariance is numerically singular (condition estimate {condition:e})")]
    SingularCovariance { condition: f64 },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("state trajectories diverged (non-finite or beyond the overflow guard)")]
    Diverged,

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
