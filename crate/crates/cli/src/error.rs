use std::fmt;

/// Failures that abort a command before its checks are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Solve(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Solve(_) | CliError::Io(_) => 2,
        }
    }

    pub(crate) fn solve(e: impl fmt::Display) -> Self {
        CliError::Solve(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Solve(m) => write!(f, "solve failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
