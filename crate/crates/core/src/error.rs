use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid axis {axis} for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("box error: {0}")]
    Box(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("class error: {0}")]
    Class(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
