use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the dereverberation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("non-finite loss at frame {frame}")]
    NonFiniteLoss { frame: usize },

    #[error("negative input to {0}")]
    NegativeInput(&'static str),

    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),

    #[error("dataset too short: {0}")]
    DatasetTooShort(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("bad snapshot: {0}")]
    BadSnapshot(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by non-finite numerics rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::NonFiniteLoss { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
