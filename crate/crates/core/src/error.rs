use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("manifest line {line}: duplicate slide_id {slide_id:?}")]
    DuplicateSlide { slide_id: String, line: usize },

    #[error("labels not covered by task {task:?} for slides: {}", slide_ids.join(", "))]
    UnresolvedLabels { task: String, slide_ids: Vec<String>, labels: Vec<String> },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file length {actual} does not match header-implied length {expected}")]
    LengthMismatch { expected: u64, actual: u64 },

    #[error("empty bag: N={n}, D={d}")]
    EmptyBag { n: u32, d: u32 },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True for failures of the operating system rather than of the input's content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Image { source, .. } => matches!(source, image::ImageError::IoError(_)),
            Error::Json { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
