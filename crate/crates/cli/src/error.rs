use std::path::{Path, PathBuf};
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("invalid config {}: {reason}", path.display())]
    Config { path: PathBuf, reason: String },
    #[error("invalid config value for {name}: {reason}")]
    Value { name: String, reason: String },
    #[error("invalid input {}: {reason}", path.display())]
    Input { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] promo_core::io::DatasetIoError),
    #[error(transparent)]
    Train(#[from] promo_core::bcq::BcqError),
    #[error(transparent)]
    Alloc(#[from] promo_core::allocator::AllocError),
    #[error(transparent)]
    Eval(#[from] promo_core::eval::EvalError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn config(path: &Path, reason: String) -> Self {
        CliError::Config { path: path.to_path_buf(), reason }
    }

    pub fn value(name: &str, reason: String) -> Self {
        CliError::Value { name: name.to_string(), reason }
    }

    pub fn input(path: &Path, reason: impl Into<String>) -> Self {
        CliError::Input { path: path.to_path_buf(), reason: reason.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// Usage errors exit with 2 (from clap); these codes follow.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Missing(_) => ExitCode::from(3),
            CliError::Config { .. } | CliError::Value { .. } => ExitCode::from(4),
            CliError::Input { .. } => ExitCode::from(5),
            _ => ExitCode::from(1),
        }
    }
}
