use std::path::{Path, PathBuf};

use sdfilter_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Core {
        context: &'static str,
        #[source]
        source: CoreError,
    },
    #[error("cannot access {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("experiment aborted: {0}")]
    Experiment(String),
    #[error("malformed input {}: {reason}", path.display())]
    Input { path: PathBuf, reason: String },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn input(path: &Path, reason: impl std::fmt::Display) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input { .. } => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Experiment(_) => EXIT_NUMERICAL,
            CliError::Core { source, .. } => match source {
                CoreError::InvalidInput(_) | CoreError::InvalidParameter(_) | CoreError::Identification(_) => {
                    EXIT_CONFIG
                }
                _ => EXIT_NUMERICAL,
            },
        }
    }
}

/// Attaches a module context to core errors.
pub trait Context<T> {
    fn context(self, context: &'static str) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, CoreError> {
    fn context(self, context: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Core { context, source })
    }
}

pub type CliResult<T> = Result<T, CliError>;
