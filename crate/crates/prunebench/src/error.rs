use thiserror::Error;

/// Error type shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not compose.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// An index (e.g. a class label) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A file on disk does not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// The pruning schedule cannot remove anything more.
    #[error("schedule exhausted: {0}")]
    ScheduleExhausted(String),

    /// Epsilon calibration could not satisfy its targets.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// No valid adversarial starting point exists in the dataset.
    #[error("starting point not found: {0}")]
    StartingPointNotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
