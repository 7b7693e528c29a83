use std::fmt::Display;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Dataset or checkpoint content failed verification (checksum, shape, name set).
    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no state decoder in this model (variant `{0}`)")]
    NoStateDecoder(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Display) -> Result<T> {
    Err(Error::InvalidArgument(msg.to_string()))
}

pub(crate) fn integrity<T>(msg: impl Display) -> Result<T> {
    Err(Error::Integrity(msg.to_string()))
}
