use ctmpc_core::Error;

/// Failure of a pipeline stage, split by the exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, unreadable config, missing inputs, or an existing output.
    #[error("{0}")]
    Input(String),
    /// An artifact exists but its contents are malformed.
    #[error("{0}")]
    Integrity(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Integrity(_) => 3,
        }
    }
}

/// Malformed artifact contents are integrity errors; everything else is an
/// input error.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Format(_) => CliError::Integrity(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
