use std::io;

use thiserror::Error;

/// Errors raised anywhere in the benchmark.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or length mismatch between values that must agree.
    #[error("structural error: {0}")]
    Structural(String),

    /// Invalid configuration or violated precondition on a parameter.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value was produced or consumed.
    #[error("numeric error{}: {message}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    Numeric { index: Option<usize>, message: String },

    /// A protocol rule of the collaboration layer was broken.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed or corrupted persisted data.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(index: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numeric { index, message: msg.into() }
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, message: msg.into() }
    }
}
