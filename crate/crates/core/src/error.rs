use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {what} at byte {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("model error in tensor `{tensor}`: {msg}")]
    Model { tensor: String, msg: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("SNR undefined: {0} has zero energy")]
    UndefinedSnr(&'static str),

    #[error("embedding coverage: need {needed} video frames, got {available}")]
    Coverage { needed: usize, available: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn model(tensor: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Model {
            tensor: tensor.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input data or files (as opposed to
    /// runtime failures).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Protocol(_))
    }
}
