use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {}: field `{field}`: {reason}", .path.display())]
    MalformedHeader {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("size mismatch in {}: header declares {expected} bytes, data has {actual}", .path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite sample at offset {offset} (band {band}, x {x}, y {y})")]
    NonFiniteSample {
        offset: usize,
        band: usize,
        x: usize,
        y: usize,
    },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("undefined normalization scale: {0}")]
    ZeroScale(String),

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("step {step} ({name}) failed: {source}")]
    Stage {
        step: u8,
        name: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
