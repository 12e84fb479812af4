use thiserror::Error;

/// Errors raised across the topoguard library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid pose for camera {id}: {reason}")]
    InvalidPose { id: String, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("numeric underflow: {0}")]
    NumericUnderflow(String),

    #[error("identity {0} has no accumulated statistics")]
    MissingIdentity(u32),

    #[error("anchor {0} has no positive in the batch")]
    NoPositive(usize),

    #[error("anchor {0} has no negative in the batch")]
    NoNegative(usize),

    #[error("batch has no valid anchors")]
    EmptyBatch,

    #[error("sinkhorn did not converge in {iterations} iterations (residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("instance too large for the exact oracle: {0} cells (limit 64)")]
    SizeLimit(usize),

    #[error("invalid marginals: {0}")]
    InvalidMarginals(String),

    #[error("ledger persistence failed: {0}")]
    Persistence(String),

    #[error("ledger integrity check failed at line {line}: {reason}")]
    LedgerCorrupt { line: usize, reason: String },

    #[error("invalid evaluation setup: {0}")]
    InvalidEvalSetup(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure { epoch: usize, reason: String },

    #[error("pipeline stage '{stage}' failed: {source}")]
    StageFailure { stage: String, source: Box<Error> },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_param(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
