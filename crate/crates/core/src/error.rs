use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("value {value} at index {index:?} does not fit in {bits} bits")]
    Range {
        index: (usize, usize),
        value: u32,
        bits: u32,
    },

    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    Format { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image file holds {images} items but label file holds {labels}")]
    Count { images: usize, labels: usize },

    #[error("non-finite loss at epoch {epoch} (tau = {tau})")]
    NonFinite { epoch: usize, tau: f64 },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
