use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] kmeta::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("report: {0}")]
    Report(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
