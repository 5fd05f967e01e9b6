use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("mask capacity exhausted: every unit is already used by earlier tasks")]
    CapacityExhausted,
    #[error("memory budget {budget} is smaller than the {classes} classes seen")]
    QuotaZero { budget: usize, classes: usize },
    #[error("replay memory is empty")]
    EmptyMemory,
    #[error("invalid state: {0}")]
    State(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
