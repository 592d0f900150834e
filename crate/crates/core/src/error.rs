use std::path::PathBuf;

/// Errors produced anywhere in the engine and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tensor `{key}`: {reason}")]
    Tensor { key: String, reason: String },

    #[error("malformed container header: {0}")]
    Header(String),

    #[error("feature cache: {0}")]
    Cache(String),

    #[error("model config does not match weights:\n{0}")]
    Config(String),

    #[error("artifact index {index} out of range 1..={max} (CLS column is never a target)")]
    ArtifactIndex { index: usize, max: usize },

    #[error("image {id}: {source}")]
    Image {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn tensor(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Tensor {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
