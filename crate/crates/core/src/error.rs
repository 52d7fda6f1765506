use std::path::PathBuf;

use tashr_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("{path}: unsupported bit depth ({detail}); expected 8 bits per channel")]
    UnsupportedBitDepth { path: PathBuf, detail: String },
    #[error("{path}: unsupported channel layout ({detail})")]
    UnsupportedChannels { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("dimension mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    DimensionMismatch {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    #[error("spatial size {height}x{width} must be a multiple of {multiple}")]
    NotDivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("annotation has no text boxes")]
    EmptyAnnotation,
    #[error("highlight geometry out of bounds: {0}")]
    GeometryOutOfBounds(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("OCR adapter failed: {0}")]
    Ocr(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
