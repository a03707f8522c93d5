use std::fmt;
use std::path::Path;

use splat360::fit::FitError;
use splat360::Error;

pub const EXIT_ARGUMENT: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_CHECK: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn argument(message: impl Into<String>) -> Self {
        Self { code: EXIT_ARGUMENT, message: message.into() }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self { code: EXIT_FORMAT, message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self { code: EXIT_NUMERIC, message: message.into() }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self { code: EXIT_CHECK, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::NotFound { EXIT_ARGUMENT } else { EXIT_FORMAT };
        Self { code, message: format!("{}: {e}", path.display()) }
    }

    /// Prefixes the message with the file it concerns.
    pub fn in_file(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Argument(_) | Error::Unsupported(_) => EXIT_ARGUMENT,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::InvalidPrimitive { .. } | Error::Format(_) | Error::Json(_) => EXIT_FORMAT,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_ARGUMENT,
            Error::Io(_) => EXIT_FORMAT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Setup(e) => e.into(),
            FitError::NonFinite { .. } => Self::numeric(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::format(e.to_string())
    }
}
