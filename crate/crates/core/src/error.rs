//! Error type shared by every stage of the toolkit.
//!
//! The variants are deliberately coarse: they map one-to-one onto the
//! process exit codes of the command-line frontend (configuration, data
//! format, numerical failure), so library code should pick the variant by
//! asking "whose fault is this?" rather than by call site.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// The caller supplied an invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two runtime objects disagree about their dimensions.
    #[error("dimension mismatch: {0}")]
    Dims(String),

    /// A file or byte stream does not follow the documented layout.
    #[error("data format error: {0}")]
    Format(String),

    /// An algorithm failed to produce a usable numerical result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn dims(msg: impl Into<String>) -> Self {
        Error::Dims(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
