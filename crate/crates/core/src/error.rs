use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid arguments or data.
    #[error("input error: {0}")]
    Input(String),
    /// An operation was requested in a state that cannot support it
    /// (missing statistics, missing Fisher, mismatched keys).
    #[error("state error: {0}")]
    State(String),
    /// Kappa is undefined because the expected disagreement is zero.
    #[error("undefined kappa: expected disagreement is zero")]
    UndefinedKappa,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A file on disk does not match its declared format.
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
