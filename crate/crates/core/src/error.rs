use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An input is outside the mathematical domain of an operation (e.g. log of 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// A non-finite value showed up where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid user-facing configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed dataset or checkpoint file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
