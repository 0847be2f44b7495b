use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {msg}")]
    ManifestLine { line: usize, msg: String },

    #[error("record {record}: signal file {path} has {actual} bytes, expected {expected}")]
    SignalLength {
        record: usize,
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

/// Coarse failure classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numerical,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numerical => 4,
            ErrorCategory::Io => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numerical => "numerical",
            ErrorCategory::Io => "io",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } | Error::Checkpoint(_) => ErrorCategory::Io,
            Error::ManifestLine { .. } | Error::SignalLength { .. } | Error::Data(_) => {
                ErrorCategory::Data
            }
            Error::Config(_) | Error::Shape(_) => ErrorCategory::Config,
            Error::Numerical(_) | Error::Tensor(_) => ErrorCategory::Numerical,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
