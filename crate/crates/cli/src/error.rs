use std::path::Path;

use motion_distill_core::Error as CoreError;

/// Every failure the CLI reports, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::Data(format!("{}: {err}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(_) | CoreError::ShapeMismatch { .. } => Self::Usage(e.to_string()),
            CoreError::GridExhausted => Self::Data(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
