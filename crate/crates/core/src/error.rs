use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("voxel index {index:?} outside grid dims {dims:?}")]
    Index { index: [usize; 3], dims: [usize; 3] },

    #[error("flip along the vertical axis is not supported")]
    UnsupportedAxis,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("placement failed: {0}")]
    Placement(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
