//! Command-line entry points and the HTTP session service.

pub mod args;
pub mod commands;
pub mod service;

use std::fmt;

use kmpadapt::io::IoError;

/// Exit code for bad usage or unreadable input.
pub const EXIT_INPUT: i32 = 2;
/// Exit code for failures after the inputs were accepted.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Write { .. } => Self::runtime(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}
