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

    #[error("{path}: byte offset {offset}: {detail}")]
    Idx { path: PathBuf, offset: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("report: {0}")]
    Report(String),

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error(transparent)]
    Core(#[from] xbprune_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Idx { .. } => "idx",
            CliError::Config(_) => "config",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Report(_) => "report",
            CliError::StageOrder(_) => "stage_order",
            CliError::Core(_) => "core",
            CliError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
