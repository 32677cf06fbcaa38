use thiserror::Error;

/// Failure modes across the crate. Variants are grouped so a caller can
/// distinguish bad inputs (`Dimension`, `Invalid*`, `Parameter`) from
/// numerical breakdowns (`Diverged`, `Bracketing`, `Conditioning`, ...).
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid {context}")]
    Invalid { context: String },

    #[error("pairs {first} and {second} share the same {which}; {which} must be pairwise distinct")]
    DuplicatePoint {
        which: &'static str,
        first: usize,
        second: usize,
    },

    #[error("schedule rejected: {reason}")]
    InvalidSchedule { reason: String },

    #[error("trajectory diverged at t = {t}{}", particle.map(|i| format!(" (particle {i})")).unwrap_or_default())]
    Diverged { t: f64, particle: Option<usize> },

    #[error("step limit exhausted at t = {t}; the field is too stiff for the requested tolerance")]
    StepLimit { t: f64 },

    #[error("conditioning failure: {context}")]
    Conditioning { context: String },

    #[error("root bracketing failure: {context}")]
    Bracketing { context: String },

    #[error("unsupported regime: {context}")]
    Unsupported { context: String },

    #[error("tube routing failed: curves {first} and {second} cannot be kept apart")]
    Routing { first: usize, second: usize },

    #[error("measure resolution too coarse: need at least {needed} particles, got {got}")]
    Resolution { needed: usize, got: usize },

    #[error("particle count {count} exceeds the assignment cap {cap}; subsample the measures first")]
    SubsampleRequired { count: usize, cap: usize },

    #[error("bad parameter: {context}")]
    Parameter { context: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(context: impl Into<String>) -> Self {
        Error::Invalid {
            context: context.into(),
        }
    }

    pub(crate) fn parameter(context: impl Into<String>) -> Self {
        Error::Parameter {
            context: context.into(),
        }
    }

    /// True for failures of the arithmetic itself rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. }
                | Error::StepLimit { .. }
                | Error::Conditioning { .. }
                | Error::Bracketing { .. }
        )
    }
}
