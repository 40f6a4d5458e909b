use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Data handed to an operation violates its preconditions
    /// (labels out of range, empty classes, too few samples).
    #[error("input error: {0}")]
    Input(String),

    /// The API was driven in an order it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary payload; `offset` is the byte position where decoding failed.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }
}
