use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at {pointer}: {message}")]
    Config { pointer: String, message: String },

    /// A stage ran before the stage that produces one of its inputs.
    #[error("stage `{stage}` needs `{artifact}` from stage `{producer}`; run `{producer}` first")]
    Dependency {
        stage: &'static str,
        artifact: String,
        producer: &'static str,
    },

    #[error("nothing to report in {0}: no manifest or no metric files")]
    EmptyReport(PathBuf),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] beamlab::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn artifact(path: &Path, message: impl std::fmt::Display) -> Self {
        CliError::Artifact {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
