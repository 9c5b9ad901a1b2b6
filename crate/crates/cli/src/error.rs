use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] composer_lab::Error),
    #[error("missing prerequisite {path}")]
    Missing { path: String, hint: String },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

/// Shape of the JSON object printed to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
    pub exit_code: i32,
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// 2 for a missing prerequisite, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Missing { .. } => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Core(_) => "runtime",
            CliError::Missing { .. } => "missing_prerequisite",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport {
            error: self.kind(),
            message: self.to_string(),
            hint: match self {
                CliError::Missing { hint, .. } => Some(hint.clone()),
                _ => None,
            },
            exit_code: self.exit_code(),
        }
    }
}
