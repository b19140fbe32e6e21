use std::path::PathBuf;

use reml_core::RemlError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] RemlError),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Process exit status for each outcome.
pub mod exit {
    pub const CONVERGED: u8 = 0;
    pub const INPUT_ERROR: u8 = 1;
    pub const NOT_CONVERGED: u8 = 2;
    pub const NUMERICAL_FAILURE: u8 = 3;
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Self::Core(e) => e.code(),
            Self::Parse { .. } => "parse_error",
            Self::UnknownColumn(_) => "unknown_column",
            Self::Config(_) => "invalid_config",
            Self::Usage(_) => "invalid_argument",
            Self::Io { .. } => "io_error",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Core(RemlError::MaxIterations { .. } | RemlError::BoundaryStall { .. }) => {
                exit::NOT_CONVERGED
            }
            Self::Core(e) if !e.is_input_error() => exit::NUMERICAL_FAILURE,
            _ => exit::INPUT_ERROR,
        }
    }
}
