use std::io;
use std::path::PathBuf;

pub type Result<T, E = DpfedError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DpfedError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] dpfed_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("runs cannot be aligned: {0}")]
    Mismatch(String),
}

impl DpfedError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DpfedError::Config(msg.into())
    }

    /// 1 for problems with what was asked for, 2 for failures while doing it.
    pub fn exit_code(&self) -> u8 {
        match self {
            DpfedError::Config(_) | DpfedError::Mismatch(_) => 1,
            DpfedError::Core(dpfed_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| DpfedError::Io {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for serde_json::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| DpfedError::Json {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for csv::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| DpfedError::Csv {
            path: path.into(),
            source,
        })
    }
}
