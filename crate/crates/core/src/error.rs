use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("training diverged in {stage} (epoch {epoch}, step {step}): loss = {loss}")]
    Divergence {
        stage: String,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes a divergence with the editing stage that produced it.
    pub fn in_stage(self, label: &str) -> Self {
        match self {
            Error::Divergence {
                stage,
                epoch,
                step,
                loss,
            } => Error::Divergence {
                stage: format!("{label}/{stage}"),
                epoch,
                step,
                loss,
            },
            other => other,
        }
    }
}
