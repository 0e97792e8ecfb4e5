//! Batch front end: `estimate`, `simulate` and `diagnose` driven by a TOML
//! run configuration.

use std::fmt;

pub mod commands;
pub mod config;

/// A failure tagged with the pipeline stage that raised it.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub stage: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
        }
    }

    /// Configuration problems exit with 2, runtime failures with 1.
    pub fn exit_code(&self) -> i32 {
        if self.stage == "config" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.message)
    }
}

impl std::error::Error for CliError {}
