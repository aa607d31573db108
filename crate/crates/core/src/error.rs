use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

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

    #[error("no records found in {0}")]
    NoRecords(PathBuf),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parameter structure mismatch: {0}")]
    Structure(String),

    #[error("non-finite loss at step {step} (samples {samples:?})")]
    NonFinite { step: u64, samples: Vec<usize> },

    #[error("retrieval: {0}")]
    Retrieval(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
