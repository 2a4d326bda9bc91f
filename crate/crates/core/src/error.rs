use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("response space of {size} exceeds enumeration cap {cap}")]
    EnumerationTooLarge { size: u128, cap: u64 },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("objects were built for different environments")]
    EnvMismatch,
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("temperature must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("non-finite value while building closed-form policy")]
    OverflowGuard,
    #[error("shift varies with the response on prompt {prompt}")]
    ShiftDependsOnResponse { prompt: usize },
    #[error("preference dataset is empty")]
    EmptyDataset,
    #[error("reward-model fit diverged at epoch {epoch}")]
    DivergedFit { epoch: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("kl_constrained shaping requires a reference policy")]
    MissingReference,
    #[error("need at least 2 samples per group, got {0}")]
    TooFewSamples(usize),
    #[error("behaviour snapshot belongs to a different environment")]
    SnapshotMismatch,
    #[error("no reference response for prompt {0}")]
    MissingReferenceResponse(usize),
    #[error("run metrics have no column `{0}`")]
    MissingColumn(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// Coarse grouping used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::InvalidConfig(_)
            | Error::EnumerationTooLarge { .. }
            | Error::MissingReference
            | Error::MissingReferenceResponse(_)
            | Error::TooFewSamples(_) => ErrorFamily::Config,
            Error::Io(_) => ErrorFamily::Io,
            _ => ErrorFamily::Numeric,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
