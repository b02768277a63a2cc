//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DbafError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DbafError>;

impl DbafError {
    pub fn shape(msg: impl Into<String>) -> Self {
        DbafError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        DbafError::Config(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        DbafError::Validation(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        DbafError::Numeric(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        DbafError::State(msg.into())
    }
}
