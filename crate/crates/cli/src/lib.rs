//! Experiment runner behind the `lyadeq` binary.

pub mod args;
pub mod commands;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Runtime(#[from] lyadeq::Error),

    #[error("{0} invariant(s) failed")]
    InvariantsFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(lyadeq::Error::Config(_)) => 1,
            CliError::Runtime(_) => 2,
            CliError::InvariantsFailed(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(lyadeq::Error::Io(std::io::Error::other(e.to_string())))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
