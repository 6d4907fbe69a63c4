use thiserror::Error;

/// Errors raised by tensor kernels, the tape, and the model layers built on them.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("backward called on a non-scalar loss of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any leaf that requires grad")]
    DetachedGraph,

    #[error("backward already ran on this tape; create a fresh tape")]
    BackwardTwice,

    #[error("decision mask is not binary (value {value} at index {index})")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("positions must be strictly increasing (got {prev} then {next})")]
    NonIncreasingPosition { prev: i64, next: i64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    VocabOverflow { id: usize, vocab: usize },

    #[error("non-finite gradient in parameter group `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
