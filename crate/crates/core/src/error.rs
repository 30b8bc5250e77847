//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or layer extents do not line up.
    #[error("dimension error: {0}")]
    Dim(String),

    /// An index (class id, anchor id, blob offset) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A call violates an API contract (wrong call order, wrong mode,
    /// non-scalar backward root, stage mismatch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or truncated checkpoint data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Malformed dataset, annotation, or detection-dump data.
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged or a computation produced non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
