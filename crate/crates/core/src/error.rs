//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, GrError>;
