use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dataset ingestion failed: expected score file {expected} is missing")]
    MissingScoreFile { expected: PathBuf },

    #[error("dataset ingestion failed: {0}")]
    Ingestion(String),

    #[error("{} record(s) reference unreadable images: {}", paths.len(), display_paths(paths))]
    UnreadableRecords { paths: Vec<PathBuf> },

    #[error("filter produced an empty split ({0})")]
    EmptySplit(String),

    #[error("weights error: {0}")]
    Weights(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch records {records:?})")]
    NonFinite { step: u64, records: Vec<usize> },

    #[error("{0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Checkpoint(format!("json: {e}"))
    }
}
