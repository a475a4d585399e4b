use std::path::Path;
use std::process::ExitCode;

use e2emil::data::DataError;
use e2emil::nn::NnError;
use e2emil::protocol::ProtocolError;
use e2emil::verify::VerifyError;

/// Failure classes, each with its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Internal(_) => 5,
        })
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) | DataError::InvalidFraction(_) | DataError::NoSplits => {
                CliError::Config(e.to_string())
            }
            DataError::Io(_) | DataError::Format(_) => CliError::Io(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::InvalidDims(_) => CliError::Config(e.to_string()),
            NnError::Io(_) | NnError::Checkpoint(_) => CliError::Io(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::InvalidEpsilon(_) => CliError::Config(e.to_string()),
            VerifyError::Io(_) | VerifyError::Csv(_) => CliError::Io(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::InvalidConfig(_) | ProtocolError::EmptySplit(_) => CliError::Config(e.to_string()),
            ProtocolError::Data(d) => d.into(),
            ProtocolError::Nn(n) => n.into(),
            ProtocolError::Verify(v) => v.into(),
            ProtocolError::Io(_) | ProtocolError::Csv(_) | ProtocolError::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}
