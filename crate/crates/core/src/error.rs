use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor handle does not belong to this tape")]
    ForeignVar,

    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid fold: {0}")]
    InvalidFold(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("episode sampling failed after {attempts} attempts: {reason}")]
    Sampling { attempts: usize, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("solver did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("config: {0}")]
    Config(String),

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
}

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

pub type Result<T> = std::result::Result<T, Error>;
