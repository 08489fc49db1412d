use thiserror::Error;

pub type Result<T> = std::result::Result<T, LamoError>;

/// Failures raised by checkpoint I/O. Each variant maps to a distinct code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"LAMO\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, file has {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("inconsistent tensor table: {0}")]
    ShapeTable(String),
    #[error("malformed header: {0}")]
    Header(String),
}

impl CheckpointError {
    /// Stable numeric code for each failure class.
    pub fn code(&self) -> u32 {
        match self {
            CheckpointError::BadMagic(_) => 1,
            CheckpointError::VersionMismatch { .. } => 2,
            CheckpointError::Truncated { .. } => 3,
            CheckpointError::ShapeTable(_) => 4,
            CheckpointError::Header(_) => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum LamoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid normalization entry: {0}")]
    InvalidEntry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("wrong mode: {0}")]
    Mode(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LamoError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LamoError::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        LamoError::Shape(msg.into())
    }
}
