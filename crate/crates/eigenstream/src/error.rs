use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: key `{key}`: {msg}")]
    Config { line: usize, key: String, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("dataset not found: {0}")]
    MissingData(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Core(#[from] eigenstream_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure is a training divergence.
    pub fn is_divergence(&self) -> bool {
        matches!(self, CliError::Core(eigenstream_core::Error::Diverged { .. }))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
