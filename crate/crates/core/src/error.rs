use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PopqlError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("singular linear system in {0}")]
    Singular(&'static str),

    #[error("ill-conditioned system (condition estimate {cond:.3e})")]
    IllConditioned { cond: f64 },

    #[error("chain has {classes} closed communicating classes; stationary distribution is not unique")]
    NonErgodic { classes: usize },

    #[error("degenerate weighting: {0}")]
    Degenerate(String),

    #[error("distribution mismatch factor is unbounded: index {index} is outside the common support")]
    UnboundedDelta { index: usize },

    #[error("empty minibatch")]
    EmptyMinibatch,

    #[error("iteration diverged at step {step}")]
    Diverged { step: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, PopqlError>;

impl From<serde_json::Error> for PopqlError {
    fn from(e: serde_json::Error) -> Self {
        PopqlError::Serde(e.to_string())
    }
}
