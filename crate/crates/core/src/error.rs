use std::io;
use std::path::PathBuf;

use crate::net::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training produced a non-finite loss. Carries the last checkpoint whose
    /// parameters were still finite.
    #[error("training diverged at iteration {iteration}: {message}")]
    Diverged {
        iteration: u64,
        message: String,
        last_good: Box<Checkpoint>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at `{key}`: {message}")]
    Parse { key: String, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
