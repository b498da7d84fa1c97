use mafr_core::MafrError;
use thiserror::Error;

/// Failure of a subcommand, classified by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<MafrError> for CliError {
    fn from(e: MafrError) -> Self {
        let msg = e.to_string();
        match e {
            MafrError::InvalidArgument(_) => CliError::Usage(msg),
            MafrError::Numerical(_) => CliError::Numerical(msg),
            MafrError::Io { .. } | MafrError::Format(_) | MafrError::Shape(_) | MafrError::Json(_) => CliError::Data(msg),
        }
    }
}
