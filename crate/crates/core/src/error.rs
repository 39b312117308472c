use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command-line harness to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index {index} out of range for {len} examples")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite log-likelihood at example {index}")]
    NonFiniteLikelihood { index: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite ELBO at step {step}")]
    NonFiniteElbo { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("deviation matrix has effective rank {rank}, fewer than the {requested} requested components")]
    RankDeficient { rank: usize, requested: usize },

    #[error("degenerate geometry: {what} has norm {norm:e}")]
    DegenerateGeometry { what: &'static str, norm: f64 },

    #[error("slice shrinkage exceeded {max_iters} iterations")]
    ShrinkLimitExceeded { max_iters: usize },

    #[error("all-zero deviation buffer")]
    ZeroBuffer,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing column {0:?}")]
    MissingColumn(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) => ErrorClass::Usage,
            Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Parse { .. }
            | Error::MissingColumn(_)
            | Error::Format(_)
            | Error::Io(_) => ErrorClass::Data,
            Error::NonFiniteLikelihood { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteElbo { .. }
            | Error::RankDeficient { .. }
            | Error::DegenerateGeometry { .. }
            | Error::ShrinkLimitExceeded { .. }
            | Error::ZeroBuffer => ErrorClass::Numerical,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}
