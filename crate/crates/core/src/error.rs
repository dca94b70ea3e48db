use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds limit {limit}")]
    Length { len: usize, limit: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("malformed data: {0}")]
    Format(String),
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

    /// Short machine-readable kind, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Index { .. } => "index",
            Error::Config(_) => "config",
            Error::Length { .. } => "length",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
