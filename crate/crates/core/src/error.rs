use std::path::PathBuf;

use crate::autodiff::GraphError;

/// Errors produced anywhere in the metric / optimization stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed image data at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("image too small: {0}")]
    TooSmall(String),

    #[error("invalid image plane: {0}")]
    InvalidPlane(String),

    #[error("no images matched {0}")]
    EmptyDataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fusion model: {0}")]
    ModelFormat(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(a: (usize, usize), b: (usize, usize)) -> Self {
        Error::DimensionMismatch(a.0, a.1, b.0, b.1)
    }
}
