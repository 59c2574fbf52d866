use std::fmt;
use std::path::{Path, PathBuf};

use cslab_core::Error;

/// Failure of one subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Missing(PathBuf),
    NonFinite(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Missing(_) => 2,
            CliError::NonFinite(_) => 3,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Missing(p) => write!(f, "missing input: {}", p.display()),
            CliError::NonFinite(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(m) => CliError::NonFinite(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

/// Adds the offending path to I/O and parse errors.
pub trait Context<T> {
    fn at(self, path: &Path) -> CliResult<T>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn at(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}
