use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rates not positive: min rtt = {min_rate}")]
    RatePositivity { min_rate: f64 },

    #[error("configuration is not half-filled: {particles} particles on {sites} sites")]
    NotHalfFilled { particles: usize, sites: usize },

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("series diverging at order {order}: term norm {norm:.3e} grew from {previous:.3e}")]
    SeriesDivergence { order: usize, norm: f64, previous: f64 },

    #[error("environments are not coupled: {0}")]
    Uncoupled(String),

    #[error("not enough trials: have {have}, need at least {need}")]
    InsufficientTrials { have: usize, need: usize },

    #[error("missing event log: {0}")]
    MissingEventLog(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
