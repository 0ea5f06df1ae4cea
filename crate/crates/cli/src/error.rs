use thiserror::Error;

/// Failures surfaced by the command line, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or input files. Exit code 1.
    #[error("{0}")]
    Config(String),
    /// Training or optimization failed numerically. Exit code 2.
    #[error("{0}")]
    Numeric(String),
    /// Writing results failed. Exit code 2.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numeric(_) | CliError::Io(_) => 2,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<solman::Error> for CliError {
    fn from(e: solman::Error) -> Self {
        match e {
            solman::Error::InvalidArgument(_) | solman::Error::World(_) => CliError::Config(e.to_string()),
            solman::Error::Numeric(_) | solman::Error::DegenerateBatch(_) | solman::Error::Internal(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
