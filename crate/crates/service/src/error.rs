use std::fmt;

use segsteer_core::Error as CoreError;

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const DIVERGED: u8 = 4;
    pub const CLASS_MISMATCH: u8 = 5;
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(exit::USAGE, message)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(exit::IO, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::Io { .. } | CoreError::Parse { .. } | CoreError::Format(_) => exit::IO,
            CoreError::NonFinite { .. } | CoreError::LogDomain { .. } => exit::DIVERGED,
            CoreError::ClassRange { .. } => exit::CLASS_MISMATCH,
            CoreError::Invalid(_) | CoreError::OutOfBounds { .. } => exit::USAGE,
            CoreError::Shape { .. } => exit::FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::io(e.to_string())
    }
}
