use thiserror::Error;

#[derive(Debug, Error)]
pub enum TealError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("missing calibration: {0}")]
    MissingCalibration(String),

    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("timer resolution too coarse: {0}")]
    TimerResolution(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TealError {
    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        TealError::Format {
            kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TealError>;
