//! Crate-wide error type.
//!
//! Variants are deliberately fine-grained: callers (the CLI in particular)
//! map them onto distinct failure classes, and tests assert that specific
//! malformed inputs surface as specific variants rather than a generic
//! message.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"FPTE\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor format version {found} (this build reads version 1)")]
    UnsupportedVersion { found: u32 },

    #[error("unsupported dtype code {found} (this build reads dtype 1, binary32)")]
    UnsupportedDtype { found: u32 },

    #[error("truncated payload: header promises {expected_bytes} bytes, file holds {found_bytes}")]
    TruncatedPayload { expected_bytes: u64, found_bytes: u64 },

    #[error("trailing bytes after payload: {extra_bytes} extra")]
    TrailingBytes { extra_bytes: u64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("{what} is empty")]
    EmptySet { what: &'static str },

    #[error("class {label:?} has {count} samples, needs at least {needed}")]
    ClassTooSmall {
        label: String,
        count: usize,
        needed: usize,
    },

    #[error("labels cover {labels} rows but features have {rows}")]
    LabelLengthMismatch { rows: usize, labels: usize },

    #[error("k = {k} out of range for set of size {n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("checksum mismatch for {path}: manifest says {expected}, payload hashes to {found}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("manifest disagrees with tensor: {detail}")]
    ManifestMismatch { detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("covariance square root did not converge (last ridge {last_ridge:e})")]
    SqrtDidNotConverge { last_ridge: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Groups variants into the coarse failure classes the CLI reports:
    /// `"io"`, `"validation"`, or `"numerical"`.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::NonFiniteLoss { .. }
            | Error::SqrtDidNotConverge { .. }
            | Error::Numerical(_) => "numerical",
            _ => "validation",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
