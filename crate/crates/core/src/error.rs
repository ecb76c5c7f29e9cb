use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: length {data_len} ≠ product {expected}")]
    LengthMismatch { data_len: usize, expected: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("layer {index} ({kind}): {message}")]
    Layer {
        index: usize,
        kind: &'static str,
        message: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error("audio: {0}")]
    Audio(String),

    #[error("manifest: {message} at line {line} (found `{found}`)")]
    Manifest {
        line: usize,
        message: &'static str,
        found: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("weights file: {0}")]
    Weights(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
