use std::path::Path;

use spdfield_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact `{artifact}`; run `{command}` first")]
    Dependency { artifact: String, command: &'static str },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed artifact: {detail}")]
    Format { path: String, detail: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Invariant(_) | CliError::Core(_) => 4,
            CliError::Io { .. } | CliError::Format { .. } => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Format { path: path.display().to_string(), detail: detail.into() }
    }
}
