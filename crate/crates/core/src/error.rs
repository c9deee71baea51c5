use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} (size {size})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("model is not trained")]
    Untrained,

    #[error("out-of-vocabulary character {0:?}")]
    OutOfVocabularyChar(char),

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("malformed cot region: {0}")]
    MalformedCot(String),

    #[error("segment violation: {0}")]
    SegmentViolation(String),

    #[error("context overflow: length {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("all token ids masked at step {0}")]
    AllMasked(usize),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
