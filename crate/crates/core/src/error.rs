use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range for {len} rows in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("{path}: bad format: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: expected {expected} payload bytes, found {found}")]
    Length {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("{0}: dataset is empty")]
    EmptyDataset(PathBuf),

    #[error("batch of {got} rows is too small (need at least {need})")]
    BatchSize { got: usize, need: usize },

    #[error("graph structure error: {0}")]
    Structure(String),

    #[error("inconsistent dataset: {0}")]
    Consistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Parse { .. }
            | Error::Format { .. }
            | Error::Length { .. }
            | Error::Data(_)
            | Error::EmptyDataset(_)
            | Error::Consistency(_)
            | Error::Io { .. } => ErrorClass::Data,
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } | Error::Domain { .. } => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Internal,
        }
    }
}
