use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid format: {0}")]
    InvalidFormat(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing tensor: {0}")]
    Missing(String),

    #[error("invalid pipeline: {0}")]
    Pipeline(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad container magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0}")]
    Version(u32),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("unsupported dtype tag {0}")]
    Dtype(u8),

    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the environment (files, permissions) rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
