use thiserror::Error;

use crate::augment::SamplerError;
use crate::forest::ForestError;
use crate::geometry::GeometryError;
use crate::metrics::MetricsError;
use crate::multiview::MultiViewError;
use crate::nnet::NnetError;

/// Crate-level error; each module also exposes its own narrower error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    MultiView(#[from] MultiViewError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed input: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
