//! Manifold capacity and dimensionality estimators.

pub mod capacity;
pub mod cone;
pub mod dimension;

use thiserror::Error;

use crate::sample::SampleError;

pub use capacity::{capacity, estimate_nstar, CapacityConfig, CapacityEstimate, Centering, NStarEstimate, Normalization};
pub use cone::{project_cone, ConeProjector, ConeSpec, Projection};
pub use dimension::{participation_ratio, twonn_id, DimEstimate, DimMethod};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("active-set solver did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("generator row {0} is all zeros")]
    ZeroGenerator(usize),
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("need at least {needed} usable points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("zero total variance")]
    ZeroVariance,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
}
