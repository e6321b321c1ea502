use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("{op} (node {node}) produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },

    #[error("leaf node {node} has no bound value")]
    UnboundLeaf { node: usize },

    #[error("node {node} is not a leaf and cannot be bound")]
    NotALeaf { node: usize },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("backward called before forward evaluation (node {node} has no value)")]
    NotEvaluated { node: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite function value at probe point {probe}")]
    NonFiniteProbe { probe: usize },

    #[error("non-finite value from {op} at batch {batch}")]
    NonFiniteLoss { batch: usize, op: &'static str },

    #[error("geometry constraints not satisfied after {attempts} attempts")]
    RetryExhausted { attempts: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("header/payload length mismatch in {path}: {detail}")]
    LengthMismatch { path: PathBuf, detail: String },

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
