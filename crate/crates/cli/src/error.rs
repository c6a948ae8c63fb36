use thiserror::Error;
use ultradp_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io { context: context.into(), source }
    }

    pub fn reading(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::io(format!("reading {}", path.display()), source)
    }

    pub fn writing(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::io(format!("writing {}", path.display()), source)
    }

    /// 0 success, 2 configuration, 3 I/O or file format, 4 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } => 3,
            Self::Core(e) => match e {
                CoreError::Config(_) | CoreError::Argument(_) | CoreError::Dimension(_) => 2,
                CoreError::Io { .. } | CoreError::Format(_) | CoreError::MalformedInput(_) => 3,
                CoreError::Training(_) | CoreError::Autodiff(_) | CoreError::Sampling(_) => 4,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
