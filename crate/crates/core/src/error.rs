use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("value {value} at index {index} is outside the fixed-point range")]
    Range { index: usize, value: f64 },

    #[error("guard-bit capacity exceeded: {summands} summands, capacity {capacity}")]
    Capacity { summands: u64, capacity: u64 },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed wire data: {0}")]
    Wire(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
