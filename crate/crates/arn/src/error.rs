//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by configuration, data handling, and training.
#[derive(Debug, Error)]
pub enum ArnError {
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset loading or generation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Tensor shape does not match what the configuration promises.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or other numeric breakdown; names the offending term.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, ArnError>;

impl From<serde_json::Error> for ArnError {
    fn from(e: serde_json::Error) -> Self {
        ArnError::Serde(e.to_string())
    }
}
