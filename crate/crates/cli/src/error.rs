use thiserror::Error;

use mvpdmp::cell::CellError;
use mvpdmp::{PdmpError, SolverError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A result came out but missed its tolerance check.
    #[error("tolerance check failed: {0}")]
    Tolerance(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Tolerance(_) => 3,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Config(m) | SolverError::Policy(m) => CliError::Config(m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<PdmpError> for CliError {
    fn from(e: PdmpError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<CellError> for CliError {
    fn from(e: CellError) -> Self {
        match e {
            CellError::InvalidParameter { .. }
            | CellError::InvalidSize(_)
            | CellError::EmptyPopulation
            | CellError::TooFewReplications(_) => CliError::Config(e.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
