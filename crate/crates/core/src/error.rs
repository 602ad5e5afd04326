use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported raster format: {0}")]
    Format(String),

    #[error("expected single band raster, found {0} bands")]
    ExpectedSingleBand(usize),

    #[error("missing raster metadata field `{0}`")]
    MissingMetadata(&'static str),

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid label {label} at row {row}, col {col}")]
    InvalidLabel { label: u8, row: usize, col: usize },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("ground sampling distance mismatch: {0} vs {1}")]
    GsdMismatch(f64, f64),

    #[error("no valid cells to evaluate")]
    NoValidCells,

    #[error("every class has an empty union; mIoU is undefined")]
    EmptyUnion,

    #[error("raster too small: {0}")]
    Degenerate(String),

    #[error("invalid roof polygon (building {building}): {reason}")]
    InvalidPolygon { building: String, reason: String },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: total loss {total}")]
    Divergence { step: usize, total: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
