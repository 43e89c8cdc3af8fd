use scanformer_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("truncated file")]
    Truncated,
    #[error("format: {0}")]
    Format(String),
    #[error("png: {0}")]
    Png(String),
    #[error("usage: {0}")]
    Usage(String),
}

impl IoError {
    /// Short machine-readable kind used in CLI and HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            IoError::Core(e) => match e {
                CoreError::ConfigMismatch(_) => "config_mismatch",
                CoreError::StaleCache { .. } | CoreError::UnsealedCache => "cache",
                CoreError::NonFiniteLoss { .. } => "non_finite_loss",
                CoreError::InvalidCamera(_) => "invalid_camera",
                _ => "invalid_input",
            },
            IoError::Io(_) => "io",
            IoError::Json(_) => "json",
            IoError::Truncated => "truncated",
            IoError::Format(_) => "format",
            IoError::Png(_) => "png",
            IoError::Usage(_) => "usage",
        }
    }
}
