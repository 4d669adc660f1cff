use std::io::ErrorKind;

use trimodal_core::{Error, FormatError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 0 success, 1 usage/config, 2 data/format, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::Contract(_) => CliError::Config(msg),
            Error::Format(FormatError::Io(io)) if io.kind() == ErrorKind::NotFound => CliError::Usage(msg),
            Error::Format(_) | Error::Shape { .. } | Error::Domain { .. } => CliError::Data(msg),
            Error::Diverged { .. } | Error::NonFinite(_) => CliError::Numeric(msg),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Error::from(e).into()
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
