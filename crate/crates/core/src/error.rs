use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// Callers that need to map failures onto coarse outcomes (the CLI exit code,
/// for instance) should use [`Error::is_io`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed XML at line {line}: {message}")]
    Xml { line: u32, message: String },

    #[error("object {object_index}: missing field `{field}`")]
    Schema { object_index: usize, field: String },

    #[error("{0}")]
    Validation(String),

    #[error("unmatched instance id {0}")]
    UnmatchedInstance(u8),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("image too crowded: {0} consecutive background rejections")]
    TooCrowded(usize),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("scorer timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem or a child process pipe
    /// rather than by the content of the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Timeout(_) => true,
            Error::Image(image::ImageError::IoError(_)) => true,
            Error::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

/// Adds a path to bare `std::io::Error`s.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
