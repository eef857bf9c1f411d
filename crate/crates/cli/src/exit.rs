use thiserror::Error;

/// Failures the binary reports, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("memory reconciliation failed: {0}")]
    Reconciliation(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) | CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Reconciliation(_) => 4,
        }
    }
}
