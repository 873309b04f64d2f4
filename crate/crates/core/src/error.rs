use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("insufficient batch: {0}")]
    InsufficientBatch(String),
    #[error("phase error: {0}")]
    Phase(String),
    #[error("instance {instance}: {source}")]
    Instance {
        instance: usize,
        #[source]
        source: TensorError,
    },
    #[error("update error: {0}")]
    Update(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            offset,
            message: message.into(),
        }
    }
}
