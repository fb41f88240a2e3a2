//! Error type shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation contract (dimension mismatch, empty
    /// input where one is required, out-of-range argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration file could not be parsed or failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// A contract violation raised inside the federated lifecycle, annotated
    /// with the (task, round, client, layer, expert) coordinate at which it
    /// occurred.
    #[error("at {at}: {source}")]
    Lifecycle {
        at: String,
        #[source]
        source: Box<CoreError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    /// Annotate an error with the lifecycle coordinate it occurred at.
    pub fn at(self, coordinate: impl Into<String>) -> Self {
        CoreError::Lifecycle {
            at: coordinate.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
