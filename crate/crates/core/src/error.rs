use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value in record {index}")]
    NonFinite { index: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violated in {stage}: {message}")]
    Contract { stage: String, message: String },

    #[error("non-finite intermediate in {path}")]
    Numerical { path: String },

    #[error("image of {height}x{width} is smaller than the {window}x{window} window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("config digest mismatch: checkpoint has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("training diverged at epoch {epoch}, batch {batch} ({at}): loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        at: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] ::image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Contract {
            stage: stage.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
