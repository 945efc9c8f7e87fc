use std::path::PathBuf;

/// Errors produced by the refinement engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("click ({row}, {col}) is outside the {height}x{width} raster")]
    OutOfBounds {
        row: i64,
        col: i64,
        height: usize,
        width: usize,
    },

    #[error("class id {class_id} is not below the class count {num_classes}")]
    ClassRange { class_id: usize, num_classes: usize },

    #[error("parse error in {path}: {msg} (byte offset {offset})")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
