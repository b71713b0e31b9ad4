//! Library behind the `dybo` binary: configuration parsing, experiment
//! orchestration, and artifact formats.

pub mod config;
pub mod driver;
pub mod formats;

/// Failure classes of the command line, mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, missing files, mismatched artifacts; exit code 2.
    Config(String),
    /// The solver hit a numerical failure; exit code 3.
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}
