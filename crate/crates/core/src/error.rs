use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("address error: {0}")]
    Address(String),
    /// The FTL asked the flash array to do something a real device would refuse.
    #[error("device rule violation: {0}")]
    DeviceRule(String),
    #[error("internal consistency violation: {0}")]
    Consistency(String),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("capacity exhausted: {0}")]
    CapacityExhausted(String),
    #[error("oracle mismatch: {0}")]
    Oracle(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}
