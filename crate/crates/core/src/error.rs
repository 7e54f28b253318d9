//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or argument shapes do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A config or skeleton file failed to parse.
    #[error("config error: {0}")]
    Config(String),

    /// A binary file is malformed (bad magic, truncated payload, ...).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A NaN or infinity surfaced where finite values are guaranteed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("io error at {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt { path: path.into(), source }
    }
}
