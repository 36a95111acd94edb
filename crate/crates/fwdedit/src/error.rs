use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FwdError>;

#[derive(Debug, Error)]
pub enum FwdError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or truncated file.
    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: unsupported checkpoint version {found} (supported: {supported})")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] fwdedit_core::Error),
    /// A run finished but missed a required threshold.
    #[error("threshold not met: {0}")]
    Threshold(String),
}

impl FwdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FwdError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        FwdError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 usage/input, 2 numeric failure, 3 threshold.
    pub fn exit_code(&self) -> i32 {
        use fwdedit_core::Error as E;
        match self {
            FwdError::Threshold(_) | FwdError::Core(E::TrainingBudget { .. }) => 3,
            FwdError::Core(E::Numeric(_) | E::NonFinite { .. } | E::Domain(_)) => 2,
            _ => 1,
        }
    }
}
