use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("attention over an empty memory")]
    EmptyMemory,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("missing asset {path}: {message}")]
    MissingAsset { path: PathBuf, message: String },

    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable lowercase name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::EmptyMemory => "empty-memory",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Unsupported(_) => "unsupported",
            Error::Evaluation(_) => "evaluation",
            Error::MissingAsset { .. } => "missing-asset",
            Error::Image { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
        }
    }

    /// The image id attached by the stream loop, if any.
    pub fn image_id(&self) -> Option<&str> {
        match self {
            Error::Image { image_id, .. } => Some(image_id),
            _ => None,
        }
    }
}
