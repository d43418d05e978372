use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid schedule, plan, dataset or experiment parameters.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was called outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A caller-side precondition does not hold.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// Null-text optimization produced a non-finite loss.
    #[error("optimizer failure at step {step}: {message}")]
    Optimizer { step: usize, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable code used in `errors.csv`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Precondition(_) => "precondition",
            Error::Optimizer { .. } => "optimizer",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
