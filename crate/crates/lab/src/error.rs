use popql_core::PopqlError;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read config {path}: {source}")]
    ConfigFile { path: PathBuf, source: std::io::Error },
    #[error("numeric failure: {0}")]
    Numeric(#[from] PopqlError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    /// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::ConfigFile { .. } => 2,
            LabError::Numeric(PopqlError::InvalidConfig(_)) => 2,
            LabError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;
