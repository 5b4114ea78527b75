use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the debiasing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("duplicate record id {id} (line {line})")]
    DuplicateId { id: u64, line: usize },

    #[error("invalid split ratios {0:?}: must be nonnegative and sum to 1")]
    InvalidRatios([f64; 3]),

    #[error("corpus has no records with anger = {0}")]
    MissingLabel(u8),

    #[error("invalid topic model input: {0}")]
    TopicModel(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("backward called before any forward pass was recorded")]
    BackwardBeforeForward,

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid generator config: {0}")]
    GenConfig(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
