use thiserror::Error;

/// Errors raised by model construction, path simulation and the Monte Carlo drivers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// A state, variation or accumulator component became NaN or infinite.
    #[error("non-finite path state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("estimator `{0}` is not supported here")]
    UnsupportedKind(&'static str),

    #[error("MLMC bias test still failing at the maximum of {max_levels} levels")]
    MaxLevelsExceeded { max_levels: usize },

    #[error("error envelope reached zero at t = {t}; increase the number of paths")]
    DegenerateEnvelope { t: f64 },

    #[error("{failed} of {total} paths blew up (more than 1%)")]
    TooManyBlowups { failed: usize, total: usize },

    #[error("regression needs at least two distinct abscissae")]
    DegenerateFit,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
