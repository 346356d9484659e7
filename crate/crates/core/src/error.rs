use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance is not symmetric positive definite (factorization failed after jitter)")]
    CovarianceNotSpd,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty point batch")]
    EmptyBatch,

    #[error("degenerate weight batch: all raw weights are zero")]
    DegenerateWeights,

    #[error("flat target on search set: all sampled densities are zero")]
    FlatTarget,

    #[error("proposal mass outside domain: gave up after {attempts} rejection draws")]
    ProposalOutsideDomain { attempts: usize },

    #[error("point is not on the domain boundary")]
    NotOnBoundary,

    #[error("degenerate reference: exact solution is zero on the whole test set")]
    DegenerateReference,

    #[error("non-finite {what} during {stage}")]
    NonFinite { what: &'static str, stage: String },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        CoreError::InvalidParameter { name, reason: reason.into() }
    }
}
