use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A point outside the support of the measure.
    #[error("{family}: point {x} is outside the support ({support})")]
    Domain {
        family: &'static str,
        x: f64,
        support: &'static str,
    },

    /// The operation is not offered by this family (no score, no path, ...).
    #[error("{family} does not support {operation}")]
    Capability {
        family: &'static str,
        operation: String,
    },

    #[error("invalid parameter {name}={value}: {reason}")]
    InvalidParameter {
        name: String,
        value: f64,
        reason: &'static str,
    },

    /// The estimator needs a derivative of the cost that was not supplied.
    #[error("cost function `{cost}` does not provide {what}")]
    MissingDerivative { cost: String, what: &'static str },

    #[error("rejection sampler exceeded {cap} proposals")]
    SamplerExhausted { cap: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("ingestion error at line {line}: {message}")]
    Ingestion { line: usize, message: String },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub(crate) fn capability(family: &'static str, operation: impl Into<String>) -> Self {
        Error::Capability {
            family,
            operation: operation.into(),
        }
    }
}
