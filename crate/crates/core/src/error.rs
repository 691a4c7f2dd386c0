use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("variables from different tapes cannot be combined")]
    CrossTape,

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("label {value} at (row {row}, col {col}) is out of range for {num_classes} classes")]
    LabelOutOfRange {
        value: usize,
        row: usize,
        col: usize,
        num_classes: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

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

    #[error("parameter file: {0}")]
    Format(String),

    #[error("configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input files.
    #[error("{0}")]
    Data(String),

    /// A numerical self-check exceeded its tolerance.
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the environment (files, configuration)
    /// rather than by numeric or shape contracts.
    pub fn is_io_or_config(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Image { .. } | Error::Format(_) | Error::Config(_) | Error::Data(_)
        )
    }
}
