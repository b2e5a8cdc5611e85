use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HistoError>;

#[derive(Debug, Error)]
pub enum HistoError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("could not decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),

    #[error("zero variance in channel {channel}: degenerate constant channel")]
    ZeroVariance { channel: usize },

    #[error("unknown backbone '{name}'; registry: {registry}")]
    UnknownBackbone { name: String, registry: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite loss component '{component}'")]
    NonFiniteLoss { component: String },

    #[error("fold {fold} diverged at epoch {epoch}: first non-finite component '{component}'")]
    Divergence {
        fold: usize,
        epoch: usize,
        component: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl HistoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HistoError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        HistoError::InvalidInput(msg.into())
    }

    /// True for errors caused by bad user input rather than internal failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            HistoError::MissingRoot(_)
                | HistoError::Config(_)
                | HistoError::InvalidInput(_)
                | HistoError::UnknownBackbone { .. }
                | HistoError::Checkpoint(_)
                | HistoError::ImageDecode { .. }
                | HistoError::ZeroVariance { .. }
                | HistoError::Io { .. }
        )
    }
}

impl From<serde_json::Error> for HistoError {
    fn from(e: serde_json::Error) -> Self {
        HistoError::Serde(e.to_string())
    }
}
