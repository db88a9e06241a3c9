//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Configuration is inconsistent (bad font id, empty codebook, geometry
    /// mismatch, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss; the message names the offender.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A persisted artifact is corrupt or has an unexpected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
