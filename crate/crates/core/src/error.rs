use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate scale: first camera sits at the world origin")]
    DegenerateScale,
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("attention row {row} has no admissible key")]
    EmptyAttentionRow { row: usize },
    #[error("stale cache: fingerprint {cache:#018x} does not match model {model:#018x}")]
    StaleCache { cache: u64, model: u64 },
    #[error("cache is not sealed")]
    UnsealedCache,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("step {step} outside schedule of {steps} steps")]
    StepOutOfRange { step: u64, steps: u64 },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
