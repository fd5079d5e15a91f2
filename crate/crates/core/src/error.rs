use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the tensor engine, graph builders, training loop and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected:?}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid adapter: cannot map {from:?} onto {to:?}")]
    InvalidAdapter { from: Vec<usize>, to: Vec<usize> },

    #[error("batchnorm: degenerate batch, {count} values per channel (need at least 2 in train mode)")]
    DegenerateBatch { count: usize },

    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corrupt file {}: {reason} (byte offset {offset})", path.display())]
    CorruptFile {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
