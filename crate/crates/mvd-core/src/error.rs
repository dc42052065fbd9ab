//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvdError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: unsupported format version {found}, this build reads version {supported}")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: truncated at byte {offset}: needed {expected} more bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
        actual: u64,
    },

    #[error("unknown ablation toggle {0:?}")]
    UnknownToggle(String),
}

impl MvdError {
    /// Process exit code the CLI maps this error to: 1 for bad input or
    /// configuration, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            MvdError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            MvdError::Io { .. } | MvdError::Truncated { .. } | MvdError::NonFinite { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MvdError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MvdError>;
