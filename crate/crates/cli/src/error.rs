use std::path::PathBuf;

use ccdf::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ccdf::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no checkpoint at {0}; run `ccdf train` first")]
    MissingCheckpoint(PathBuf),

    #[error("no index at {0}; run `ccdf build-index` first")]
    MissingIndex(PathBuf),

    #[error("{path} not found; run `ccdf {stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("work dir {0} is locked by another run (remove the lock file if no run is active)")]
    Locked(PathBuf),

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Write {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Core(e) => e.class(),
            CliError::Config(_) | CliError::Locked(_) => ErrorClass::Config,
            CliError::MissingCheckpoint(_) | CliError::MissingIndex(_) => ErrorClass::Model,
            CliError::MissingArtifact { .. } => ErrorClass::Data,
            CliError::Write { .. } => ErrorClass::Internal,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Config(_) => "config",
            CliError::MissingCheckpoint(_) => "missing-checkpoint",
            CliError::MissingIndex(_) => "missing-index",
            CliError::MissingArtifact { .. } => "missing-artifact",
            CliError::Locked(_) => "work-dir-locked",
            CliError::Write { .. } => "write-failed",
        }
    }

    /// 2 config, 3 data, 4 model, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Model => 4,
            ErrorClass::Internal => 5,
        }
    }

    /// `error code=<code> exit=<n> message="<text>"` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ").replace('"', "'");
        format!("error code={} exit={} message=\"{msg}\"", self.code(), self.exit_code())
    }
}
