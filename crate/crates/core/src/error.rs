use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("incompatible tensor `{tensor}`: {detail}")]
    Incompatible { tensor: String, detail: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("run aborted at repeat {repeat}, fold {fold}, epoch {epoch}, step {step}: loss = {loss}")]
    AbortedRun {
        repeat: usize,
        fold: usize,
        epoch: usize,
        step: usize,
        loss: f32,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Input(_) => "input",
            Error::Format(_) => "format",
            Error::Incompatible { .. } => "incompatible",
            Error::Invariant(_) => "invariant",
            Error::NonFinite(_) => "non_finite",
            Error::AbortedRun { .. } => "aborted_run",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
