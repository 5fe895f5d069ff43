use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum GcmError {
    /// Tensor shapes are incompatible with the requested kernel.
    #[error("shape error: {0}")]
    Shape(String),

    /// Caller-supplied arguments violate an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// A loaded or constructed object violates its own invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// A line of an on-disk file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Optimization failed to converge or diverged.
    #[error("training error: {0}")]
    Training(String),

    /// A statistic is undefined on the given data (e.g. all-zero deltas).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GcmError>;
