use thiserror::Error;

/// Failures mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    SplitOverlap(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::SplitOverlap(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<risktube::sim::SimError> for CliError {
    fn from(e: risktube::sim::SimError) -> Self {
        match e {
            risktube::sim::SimError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<risktube::pipeline::PipelineError> for CliError {
    fn from(e: risktube::pipeline::PipelineError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<risktube::conformal::ConformalError> for CliError {
    fn from(e: risktube::conformal::ConformalError) -> Self {
        CliError::Validation(e.to_string())
    }
}
