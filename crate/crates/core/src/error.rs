use std::path::PathBuf;

use crate::anatomy::Structure;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("structure {0} is not part of the layout")]
    StructureNotInLayout(Structure),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] heteroseg_autograd::Error),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::File { path: path.into(), message: message.into() }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Layout(_) | Error::Topology(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
