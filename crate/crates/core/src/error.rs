use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("insufficient samples for {what}: {required} required, {available} available")]
    InsufficientSamples {
        what: String,
        required: u64,
        available: u64,
    },

    #[error("rejection sampling acceptance rate {rate:.4} fell below 1/2 (cap {cap})")]
    AcceptanceRate { rate: f64, cap: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("budget exhausted in {stage}: {used} work units exceed the limit of {limit}")]
    BudgetExhausted { stage: String, used: u64, limit: u64 },

    #[error("no candidates produced by {stage}: {advice}")]
    EmptyCandidates { stage: String, advice: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Errors caused by the sampling/estimation stage rather than bad input.
    pub fn is_estimation_failure(&self) -> bool {
        matches!(
            self,
            Error::InsufficientSamples { .. } | Error::AcceptanceRate { .. } | Error::NonFinite(_)
        )
    }
}
