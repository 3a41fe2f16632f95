use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "log-moment integration did not converge (lambda={lambda}, q={q}, z={z}): \
         error estimate {error_estimate:e} after {intervals} subintervals"
    )]
    Integration {
        lambda: u32,
        q: f64,
        z: f64,
        error_estimate: f64,
        intervals: usize,
    },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("user {user_id}, local batch {batch}: {source}")]
    UserUpdate {
        user_id: u64,
        batch: usize,
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round { round: u64, source: Box<Error> },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
