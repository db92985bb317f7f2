use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not match {len} data elements")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("masked softmax: row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("invalid stage boundaries t1={t1}, t2={t2} for {len} snippets")]
    Boundaries { t1: usize, t2: usize, len: usize },

    #[error("sample is missing stream `{0}`")]
    MissingStream(&'static str),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        last_good: Box<crate::harness::Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
