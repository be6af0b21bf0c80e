use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension {requested} is not supported (maximum {max})")]
    UnsupportedDimension { requested: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("matrix is ill-conditioned even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("feature map is empty: no seed produced a finite fitness")]
    EmptyMap,

    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("evaluator failure: {0}")]
    Evaluator(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by bad caller input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::DimensionMismatch { .. }
                | Error::UnsupportedDimension { .. }
                | Error::InvalidData(_)
                | Error::NotFound(_)
        )
    }
}
