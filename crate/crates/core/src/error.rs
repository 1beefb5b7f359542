//! Error type shared by every module in the crate.
//!
//! Variants are grouped by how callers are expected to react: invalid-input
//! style errors mean the data or arguments can never work, numerical failures
//! mean a retry with different parameters or seed may work.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Arguments or data violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A simplex dimension outside the valid range for the operation.
    #[error("invalid dimension {p}: {reason}")]
    InvalidDimension { p: usize, reason: String },

    /// A channel with zero variance where a z-score or correlation is needed.
    #[error("channel {channel} has zero variance")]
    ZeroVariance { channel: usize },

    /// Correlation is undefined (constant series, empty overlap, ...).
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    /// Mismatched or missing companion state (stale transcript, absent cache).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// NaN or infinity produced where a finite value is required.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Text input that could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for the common invalid-input case.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Helper for numerical failures with context.
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }
}
