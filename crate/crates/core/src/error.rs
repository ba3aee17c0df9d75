use std::path::PathBuf;

use thiserror::Error;

/// Broad failure classes. The CLI maps each one to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Model,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{malformed} of {total} rows malformed; not an interaction log?")]
    MostlyMalformed { malformed: usize, total: usize },

    #[error("log contains no valid interactions")]
    EmptyLog,

    #[error("training split is empty")]
    EmptyTrainSplit,

    #[error("invalid split boundaries: train_end={train_end} valid_end={valid_end} test_end={test_end}")]
    InvalidSplit {
        train_end: i64,
        valid_end: i64,
        test_end: i64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token out of range: {table} row {index} (table has {rows} rows)")]
    TokenOutOfRange {
        table: &'static str,
        index: usize,
        rows: usize,
    },

    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: u64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("no training samples")]
    NoSamples,

    #[error("corrupt {what} at line {line}: {msg}")]
    Corrupt {
        what: &'static str,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidSplit { .. } => ErrorClass::Config,
            Error::Io { .. }
            | Error::MostlyMalformed { .. }
            | Error::EmptyLog
            | Error::EmptyTrainSplit
            | Error::UnknownId { .. }
            | Error::NoSamples
            | Error::Corrupt { .. } => ErrorClass::Data,
            Error::TokenOutOfRange { .. }
            | Error::NonFinite(_)
            | Error::BadMagic(_)
            | Error::VersionMismatch { .. }
            | Error::SizeMismatch(_)
            | Error::ShapeMismatch { .. }
            | Error::Manifest(_) => ErrorClass::Model,
        }
    }

    /// Stable kebab-case identifier for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MostlyMalformed { .. } => "malformed-log",
            Error::EmptyLog => "empty-log",
            Error::EmptyTrainSplit => "empty-train-split",
            Error::InvalidSplit { .. } => "invalid-split",
            Error::Config(_) => "config",
            Error::TokenOutOfRange { .. } => "token-out-of-range",
            Error::UnknownId { .. } => "unknown-id",
            Error::NonFinite(_) => "non-finite",
            Error::BadMagic(_) => "bad-magic",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::SizeMismatch(_) => "size-mismatch",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Manifest(_) => "bad-manifest",
            Error::NoSamples => "no-samples",
            Error::Corrupt { .. } => "corrupt-artifact",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
