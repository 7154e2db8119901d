use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    /// Cholesky factorization failed on a matrix that must be symmetric positive definite.
    #[error("{context}: matrix is not symmetric positive definite")]
    NotPositiveDefinite { context: &'static str },

    #[error("{context}: matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { context: &'static str, asymmetry: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A divergence evaluated below the round-off band; this indicates a formula bug.
    #[error("divergence evaluated to {0:e}, below the round-off tolerance")]
    NegativeDivergence(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("learning-rate schedule exhausted: iteration {t} with t_max {t_max}")]
    ScheduleExhausted { t: u64, t_max: u64 },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at iteration {iteration}: {details}")]
    Diverged { iteration: u64, details: String },

    #[error("invalid config key `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
