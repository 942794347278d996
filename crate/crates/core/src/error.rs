use thiserror::Error;

/// Errors raised by the library.
///
/// The variants are grouped the way the command-line frontend maps them to
/// exit codes: configuration problems, malformed or inconsistent data, and
/// statistical degeneracy (nothing left to estimate from).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("duplicate location id `{0}`")]
    DuplicatePid(String),

    #[error("unknown location id `{0}`")]
    UnknownPid(String),

    #[error("statistically degenerate input: {0}")]
    Degenerate(String),

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
