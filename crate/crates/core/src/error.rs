use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions {height}x{width}: {reason}")]
    Dimensions {
        height: usize,
        width: usize,
        reason: &'static str,
    },

    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("failed to encode image {path}: {reason}")]
    ImageEncode { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Annotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("empty corpus at {0}")]
    EmptyCorpus(PathBuf),

    #[error("palette: {0}")]
    Palette(String),

    #[error("detector: {0}")]
    Detector(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("placement: {0}")]
    Placement(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    Training {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
