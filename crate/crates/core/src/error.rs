use thiserror::Error;

use crate::volume::Dims;

/// Errors produced by the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate intensity range: min = max = {0}")]
    DegenerateRange(f64),
    #[error("volume too small: {0}")]
    TooSmall(String),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Dims, Dims),
    #[error("invalid dimensions {nx}x{ny}x{nz}: every axis needs at least 2 voxels")]
    InvalidDims { nx: usize, ny: usize, nz: usize },
    #[error("data length {got} does not match {expected} voxels")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("mixture component {component} is empty (effective count {count:e}); k is too large for the data")]
    EmptyComponent { component: usize, count: f64 },
    #[error("window radius {radius} too large for dims {dims:?}")]
    WindowTooLarge { radius: usize, dims: Dims },
    #[error("invalid k range [{0}, {1}]")]
    InvalidRange(usize, usize),
    #[error("label {0} is empty in at least one label map")]
    EmptyLabel(u16),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("requested k = {k} but the mixture could not populate every component: {source}")]
    KMismatch {
        k: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the numbers themselves rather than by
    /// malformed input files or arguments.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::Format(_) | Error::File { .. } | Error::Io(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
