//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up; the message names both shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Bad configuration or flag value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset, file, or checkpoint content problems.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Backward was already run on this tape; tapes are single-use.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
