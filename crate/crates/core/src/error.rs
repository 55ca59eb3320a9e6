use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x}, {y}, {w}, {h}): width and height must be positive and all coordinates finite")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty ROI: box lies entirely outside the feature grid")]
    EmptyRoi,

    #[error("placement failed: no layout satisfied the occlusion target after {retries} retries")]
    PlacementFailed { retries: usize },

    #[error("proposal belongs to image {found}, expected image {expected}")]
    ForeignProposal { expected: u64, found: u64 },

    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("incomplete distance matrix: no entry for pair ({0}, {1}) with IoU above the NMS threshold")]
    IncompleteDistanceMatrix(usize, usize),

    #[error("training diverged: loss is {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
