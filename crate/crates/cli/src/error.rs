use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tensor_file::TensorError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Missing or malformed inputs, bad flags, shape mismatches.
    #[error("{0}")]
    Input(String),
    #[error("infeasible constraint: {constraint} is below the minimum achievable latency {floor}")]
    Infeasible { floor: f64, constraint: f64 },
    #[error("internal error: {0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Infeasible { .. } => EXIT_INFEASIBLE,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl From<maskprune_core::Error> for CliError {
    fn from(e: maskprune_core::Error) -> Self {
        match e {
            maskprune_core::Error::Infeasible { floor, constraint } => CliError::Infeasible { floor, constraint },
            other => CliError::Input(other.to_string()),
        }
    }
}

/// Attaches the offending path to I/O and format errors.
pub trait PathContext<T> {
    fn reading(self, path: &Path) -> CliResult<T>;
    fn writing(self, path: &Path) -> CliResult<T>;
}

impl<T> PathContext<T> for Result<T, TensorError> {
    fn reading(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Input(format!("{}: {e} [{}]", path.display(), e.code())))
    }

    fn writing(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| match e {
            TensorError::Io(io) => CliError::Internal(format!("cannot write {}: {io}", path.display())),
            other => CliError::Internal(format!("{}: {other}", path.display())),
        })
    }
}

impl<T> PathContext<T> for Result<T, io::Error> {
    fn reading(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    fn writing(self, path: &Path) -> CliResult<T> {
        self.map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
    }
}
