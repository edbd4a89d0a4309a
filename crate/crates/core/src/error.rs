use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not conform.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A scalar argument is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// NaN or infinite value where a finite one was required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    /// An operation was requested in a state that cannot serve it.
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }
}
