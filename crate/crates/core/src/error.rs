use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-monotonic at {0}")]
    NonMonotonic(String),

    #[error("event at ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        x: u64,
        y: u64,
        width: u16,
        height: u16,
    },

    #[error("bad magic: expected EVG1")]
    BadMagic,

    #[error("truncated record")]
    Truncated,

    #[error("invalid format: {0}")]
    Format(String),

    #[error("empty stream")]
    EmptyStream,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing metadata: {0}")]
    MissingMetadata(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics (NaN/inf) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
