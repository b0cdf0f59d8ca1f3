use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Invalid hyperparameters or model/method combinations.
    #[error("config error: {0}")]
    Config(String),
    /// Violated operation precondition (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),
    /// NaN or infinite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
