use std::io;

use thiserror::Error;
use ultradp_autodiff::AutodiffError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }
}
