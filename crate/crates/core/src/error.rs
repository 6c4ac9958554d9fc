use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocabulary target size {target} is too small: need at least {required}")]
    TargetTooSmall { target: usize, required: usize },

    #[error("vocabulary target size {target} unreachable: merges exhausted at {reached}")]
    TargetUnreachable { target: usize, reached: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("name list is empty")]
    EmptyNameList,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("default token id {0} has no routing entry")]
    MissingRoutingKey(u32),

    #[error("cannot split {ids} routing ids into {buckets} buckets")]
    TooFewIds { ids: usize, buckets: usize },

    #[error("invalid bucket plan: {0}")]
    InvalidPlan(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch for {which}: checkpoint {expected}, supplied {found}")]
    VocabHashMismatch {
        which: &'static str,
        expected: String,
        found: String,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
