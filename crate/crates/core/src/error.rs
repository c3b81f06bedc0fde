use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset too small for {folds} stratified folds: need at least {required} examples of each class, found {found_negative} negatives and {found_positive} positives")]
    DatasetTooSmall {
        folds: usize,
        required: usize,
        found_negative: usize,
        found_positive: usize,
    },

    #[error("fold schedule exhausted after {consumed} folds ({context})")]
    FoldsExhausted { consumed: usize, context: String },

    #[error("{path}: row {row} (line {line}), column {column}: {message}")]
    Csv {
        path: PathBuf,
        row: usize,
        line: usize,
        column: String,
        message: String,
    },

    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("non-finite loss for client {client} in round {round}")]
    NonFiniteLoss { round: usize, client: usize },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
