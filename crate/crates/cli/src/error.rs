use std::path::{Path, PathBuf};

use calibra_core::Error as CoreError;
use thiserror::Error;

/// Exit status for a bad flag, config value or unreadable input.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for failures while computing (divergence, I/O while writing).
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    /// Wraps a core error raised while reading `path`.
    pub fn reading(path: &Path, e: CoreError) -> Self {
        match CliError::from(e) {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            CliError::Runtime(msg) => CliError::Runtime(format!("{}: {msg}", path.display())),
        }
    }

    pub fn writing(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Numerical(_) => CliError::Runtime(msg),
            CoreError::Io(ref io) if io.kind() != std::io::ErrorKind::NotFound => CliError::Runtime(msg),
            _ => CliError::Config(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn require_file(path: &PathBuf) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} does not exist or is not a file", path.display())))
    }
}
