use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use hetattr::fixtures::FixtureError;
use hetattr::format::FormatError;
use hetattr::propagation::PropagationError;
use hetattr::suite::SuiteError;
use thiserror::Error;

/// Input is malformed or inconsistent.
pub const EXIT_VALIDATION: u8 = 3;
/// A file could not be read or written.
pub const EXIT_IO: u8 = 4;
/// A numerical self-check failed or produced non-finite output.
pub const EXIT_NUMERICAL: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        })
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, e: FormatError) -> CliError {
        let path = path.into();
        match e {
            FormatError::Io(source) => CliError::Io { path, source },
            other => CliError::Validation(format!("{}: {other}", path.display())),
        }
    }
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::Io { path, source } => CliError::Io { path, source },
            FixtureError::Format { path, source } => CliError::format(path, source),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<PropagationError> for CliError {
    fn from(e: PropagationError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SuiteError> for CliError {
    fn from(e: SuiteError) -> Self {
        CliError::Validation(e.to_string())
    }
}
