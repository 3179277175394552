//! Command implementations behind the `online-wpe` binary.

pub mod commands;
pub mod config;
pub mod demo;

use online_wpe::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Core(e) if e.is_numeric() => exit::NUMERIC,
            CliError::Core(Error::InvalidConfig(_) | Error::Missing(_)) => exit::USAGE,
            CliError::Core(_) => exit::DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
