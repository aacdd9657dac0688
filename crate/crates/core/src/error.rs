use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: String, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("epoch {epoch} is outside the schedule range [0, {n_max}]")]
    EpochOutOfRange { epoch: usize, n_max: usize },

    #[error("FLOPs expectation must be positive, got {0}")]
    NonPositiveFlops(f64),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("indicator site {site} mismatch: {detail}")]
    Site { site: usize, detail: String },

    #[error("layer collapsed: indicator site {site} keeps no channel")]
    LayerCollapsed { site: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {snapshot}")]
    Divergence {
        epoch: usize,
        step: usize,
        snapshot: String,
    },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
