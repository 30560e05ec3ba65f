use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shapes, plan/partition
    /// mismatch, empty chunks, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value fell outside the domain of an operation (log of a non-positive
    /// number, non-finite loss, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A per-slot set normalizer was not strictly positive.
    #[error("degenerate normalizer for slot {slot}: {value}")]
    DegenerateNormalizer { slot: usize, value: f64 },

    #[error("config error: {0}")]
    Config(String),

    /// A training step failed.
    #[error("step {step}: {source}")]
    Step { step: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

pub(crate) use contract;
pub(crate) use ensure;
