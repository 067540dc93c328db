use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A non-finite value appeared while building Taylor coefficients.
    #[error("non-finite value at Taylor coefficient order {order}")]
    NonFiniteCoefficient { order: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("requested order {requested} exceeds supported maximum {max}")]
    OrderTooHigh { requested: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Matrix expected to be positive (semi-)definite is not, beyond rounding.
    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
