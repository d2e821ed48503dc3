use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    DataValidation,
    RunFailure,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::DataValidation => 2,
            ErrorKind::RunFailure => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::DataValidation => "data",
            ErrorKind::RunFailure => "run",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },

    #[error("validation: {0}")]
    Validation(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("run {run_id} diverged at epoch {epoch}: non-finite loss")]
    Diverged { run_id: String, epoch: usize },

    #[error("run {run_id} interrupted at epoch {epoch}")]
    Interrupted { run_id: String, epoch: usize },

    #[error("unknown run id {0}")]
    UnknownRun(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } | Error::Json(_) => {
                ErrorKind::DataValidation
            }
            Error::Diverged { .. } | Error::Interrupted { .. } | Error::UnknownRun(_) => {
                ErrorKind::RunFailure
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
