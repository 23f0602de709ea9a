use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("terminal node {0} is not a scalar (shape {1:?})")]
    NonScalar(usize, Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("unknown catalog index {0}")]
    UnknownItem(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("bundle lacks parameter group `{0}` required by this mode")]
    MissingGroup(String),
    #[error("group `{group}` tensor `{tensor}`: axis {axis} is {found}, model expects {expected}")]
    DimMismatch {
        group: String,
        tensor: String,
        axis: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
