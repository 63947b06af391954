use std::path::PathBuf;

use wavecast_core::Error as CoreError;

/// Failures surfaced by the command-line layer, each with an exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    /// 1 usage or config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) | AppError::Config(_) => 1,
            AppError::Data(_) | AppError::Io { .. } => 2,
            AppError::Numeric(_) => 3,
            AppError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Dimension(_) | CoreError::Patching(_) => 1,
                CoreError::Length(_) | CoreError::Structure(_) | CoreError::Ingestion { .. } => 2,
                CoreError::Numeric(_) | CoreError::Training(_) | CoreError::UndefinedMetric(_) => 3,
            },
        }
    }
}
