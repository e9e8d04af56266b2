//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation's precondition (bad argument, shape
    /// mismatch, out-of-range label, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric evaluation produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Configuration file or config/checkpoint combination is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A compression target cannot be met within tolerance.
    #[error("infeasible compression target: {0}")]
    Infeasible(String),

    /// Checkpoint container is malformed, truncated or corrupted.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
