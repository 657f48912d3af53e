use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bone `bone` (labelled by its child joint) has (near) zero length.
    #[error("degenerate bone {bone}{}", frame_suffix(*.frame))]
    DegenerateBone { bone: usize, frame: Option<usize> },

    #[error("point is behind the camera{}", location_suffix(*.frame, *.joint))]
    BehindCamera {
        frame: Option<usize>,
        joint: Option<usize>,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("sampling produced a non-positive length for bone {bone}")]
    NonPositiveResult { bone: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("label mismatch: {0}")]
    LabelMismatch(String),

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dims(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    /// Whether the error stems from malformed input rather than a failure
    /// while computing. Front ends use this to choose an exit status.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::DimensionMismatch { .. }
            | Error::LabelMismatch(_)
            | Error::InvalidTopology(_)
            | Error::InvalidValue(_)
            | Error::Schema { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

fn frame_suffix(frame: Option<usize>) -> String {
    frame.map(|f| format!(" (frame {f})")).unwrap_or_default()
}

fn location_suffix(frame: Option<usize>, joint: Option<usize>) -> String {
    match (frame, joint) {
        (Some(f), Some(j)) => format!(" (frame {f}, joint {j})"),
        (None, Some(j)) => format!(" (joint {j})"),
        (Some(f), None) => format!(" (frame {f})"),
        (None, None) => String::new(),
    }
}
