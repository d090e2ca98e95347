use std::fmt;

use wfc_core::WfcError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MISSING_LABELS: i32 = 4;
pub const EXIT_DIVERGED: i32 = 5;
pub const EXIT_THEORY_VIOLATION: i32 = 6;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new(EXIT_USAGE, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &WfcError) -> i32 {
    match e {
        WfcError::InvalidConfig(_)
        | WfcError::InvalidSelector(_)
        | WfcError::Shape(_)
        | WfcError::Label { .. }
        | WfcError::UnsupportedGroupArity(_) => EXIT_USAGE,
        WfcError::Io(_)
        | WfcError::BadMagic { .. }
        | WfcError::VersionMismatch { .. }
        | WfcError::Truncated(_)
        | WfcError::LengthMismatch { .. }
        | WfcError::Format(_) => EXIT_IO,
        WfcError::MissingAttribute | WfcError::MissingLabels => EXIT_MISSING_LABELS,
        WfcError::TrainingDiverged { .. } => EXIT_DIVERGED,
        _ => EXIT_FAILURE,
    }
}

impl From<WfcError> for CliError {
    fn from(e: WfcError) -> Self {
        CliError::new(exit_code(&e), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(EXIT_IO, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(EXIT_FAILURE, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new(EXIT_IO, e.to_string())
    }
}
