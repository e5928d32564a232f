use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty fallback chain")]
    EmptyFallbackChain,
    #[error("cannot load font {path}: {reason}")]
    FontLoad { path: PathBuf, reason: String },
    #[error("empty input line")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("corrupt {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Tensor(#[from] pixelrep_tensor::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    PathIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn format_err<T>(what: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { what, msg: msg.into() })
}

pub(crate) trait PathContext<T> {
    fn at(self, path: &std::path::Path) -> Result<T>;
}

impl<T> PathContext<T> for std::io::Result<T> {
    fn at(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|source| Error::PathIo {
            path: path.to_path_buf(),
            source,
        })
    }
}
