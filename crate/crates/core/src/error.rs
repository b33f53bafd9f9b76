use thiserror::Error;

/// Errors raised by the decoding engine and its analyses.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MageError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("allocation error: {0}")]
    Allocation(String),
    #[error("state error: {0}")]
    State(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("cost model error: {0}")]
    Model(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl MageError {
    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        MageError::Parse {
            offset: offset as u64,
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for MageError {
    fn from(e: std::io::Error) -> Self {
        MageError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, MageError>;
