use daisi::DaisiError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(#[from] DaisiError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checks failed:\n{0}")]
    CheckFailed(String),
}

impl CliError {
    /// Process exit code: 2 config or i/o, 3 numerical, 4 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            // Unreadable model files surface from the core library as i/o or
            // format errors; they are input problems, not numerical ones.
            CliError::Numerical(DaisiError::Io(_) | DaisiError::Format(_)) => 2,
            CliError::Numerical(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }
}
