use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GroveError>;

#[derive(Debug, Error)]
pub enum GroveError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not positive definite (jitter cap {cap:e} exceeded)")]
    NotPositiveDefinite { cap: f64 },

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("dataset is empty or too small: {0}")]
    EmptyDataset(String),

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("k = {k} exceeds the number of candidates ({n})")]
    KTooLarge { k: usize, n: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported format version {found}")]
    BadVersion { path: PathBuf, found: u16 },

    #[error("{path}: unsupported dtype code {found}")]
    UnsupportedDtype { path: PathBuf, found: u8 },

    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: bad header: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("{path}:{line}: index {index} out of range for {what} with {len} rows")]
    IndexOutOfRange {
        path: PathBuf,
        line: u64,
        what: &'static str,
        index: u64,
        len: usize,
    },

    #[error("{path}:{line}: group {group} maps to image rows {first} and {second}")]
    InconsistentGroup {
        path: PathBuf,
        line: u64,
        group: String,
        first: usize,
        second: usize,
    },

    #[error("{path}:{line}: bad split label {label:?}")]
    BadSplitLabel {
        path: PathBuf,
        line: u64,
        label: String,
    },

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GroveError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GroveError::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse class used by front ends to map errors onto exit codes.
    pub fn class(&self) -> ErrorClass {
        use GroveError::*;
        match self {
            NotPositiveDefinite { .. } | NonFiniteValue(_) | NonFiniteLoss { .. } => {
                ErrorClass::Numerical
            }
            InvalidConfig(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}
