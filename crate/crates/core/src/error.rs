use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("failed to read {path}: {message}")]
    Read { path: PathBuf, message: String },

    #[error("failed to write {path}: {message}")]
    Write { path: PathBuf, message: String },

    #[error("non-finite {what} at iteration {iter} ({phase}); batch: [{batch}]")]
    NonFinite {
        what: &'static str,
        iter: usize,
        phase: &'static str,
        batch: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("feature dimension mismatch: checkpoint has {checkpoint}, configuration requests {config}")]
    FeatureDim { checkpoint: usize, config: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

impl Error {
    pub(crate) fn read(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Read {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Write {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
