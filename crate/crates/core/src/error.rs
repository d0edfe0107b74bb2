//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by the training laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible lengths.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    /// Input is well-typed but the operation is undefined on it (zero norm, NaN, empty batch).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed dataset file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A declared privacy contract was violated at runtime.
    #[error("contract violation: {0}")]
    Contract(String),

    /// No noise multiplier satisfies the requested budget.
    #[error("calibration failed: {0}")]
    Calibration(String),

    /// Configuration is missing a key, has a wrong type, or breaks an invariant.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
