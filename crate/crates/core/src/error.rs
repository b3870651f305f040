use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// The request exceeds the enumeration guard.
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    /// Unknown preset or named entity.
    #[error("lookup failed: {0}")]
    Lookup(String),
    /// The quantity is mathematically undefined for the given inputs.
    #[error("undefined: {0}")]
    Undefined(String),
    /// A fit failed to converge or was ill-posed.
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
