use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Exit code for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for missing or stale inputs from an earlier stage.
pub const EXIT_PREREQUISITE: i32 = 3;
/// Exit code for failures while a stage runs.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing {what} at {}; run `musicot {stage}` first", path.display())]
    Missing {
        what: &'static str,
        stage: &'static str,
        path: PathBuf,
    },

    #[error("{what} at {} was built from a different config; rerun `musicot {stage}`", path.display())]
    Stale {
        what: &'static str,
        stage: &'static str,
        path: PathBuf,
    },

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),

    #[error(transparent)]
    Core(#[from] musicot::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(musicot::Error::Config(_)) => EXIT_CONFIG,
            CliError::Missing { .. } | CliError::Stale { .. } | CliError::Exists(_) => EXIT_PREREQUISITE,
            _ => EXIT_RUNTIME,
        }
    }
}
