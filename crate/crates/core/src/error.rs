use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooManyRows { rows: usize, cols: usize },

    #[error("class head cannot shrink from {from} to {to} classes")]
    ClassCountRegression { from: usize, to: usize },

    #[error("crop transform is not invertible (scale {sx} x {sy})")]
    NonInvertibleTransform { sx: f64, sy: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("malformed document {path}: {message}")]
    Malformed { path: String, message: String },

    #[error("missing prerequisite {0}")]
    MissingPrerequisite(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by user input (bad config, missing files)
    /// rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Empty(_)
                | Error::ConfigHashMismatch { .. }
                | Error::Malformed { .. }
                | Error::MissingPrerequisite(_)
                | Error::ClassCountRegression { .. }
                | Error::Io(_)
        )
    }
}
