use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates its contract (class ids, empty sets, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A serialized file could not be decoded.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("numerical consistency error: {0}")]
    Numerical(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {0}")]
    Diverged(usize),

    /// A verification harness measured an error above its threshold.
    #[error("tolerance exceeded: {0}")]
    Tolerance(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
