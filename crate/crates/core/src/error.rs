//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or usage (bad dimensions, hyperparameters, flags).
    #[error("configuration error: {0}")]
    Config(String),
    /// Dataset, manifest, checkpoint or image problems.
    #[error("data error: {0}")]
    Data(String),
    /// Numeric failure (non-finite loss, undefined metric).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
