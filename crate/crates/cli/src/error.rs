use std::path::{Path, PathBuf};

use triggerless_core::Error as CoreError;

/// Command failure, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Evaluation(String),
}

impl CliError {
    /// 1 usage/config, 2 I/O or unreadable data, 3 horizon exhausted or evaluation failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Data(_) => 2,
            CliError::Evaluation(_) => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn config(e: CoreError) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn data(e: CoreError) -> Self {
        match e {
            CoreError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Io { .. } | CoreError::Checkpoint(_) | CoreError::Idx(_) | CoreError::Fixture { .. } => {
                CliError::data(e)
            }
            CoreError::HorizonExhausted { .. }
            | CoreError::InsufficientQueries { .. }
            | CoreError::EmptyInput(_) => CliError::Evaluation(e.to_string()),
            CoreError::Contract(_) | CoreError::ShapeMismatch { .. } => CliError::Config(e.to_string()),
        }
    }
}
