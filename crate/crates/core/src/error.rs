use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: row {row}, column {column}: {message}")]
    Parse {
        file: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("dataset is inconsistent: {0}")]
    Dataset(String),

    #[error("dropout must lie in [0, 1], got {0}")]
    Dropout(f64),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
