//! Geometry of intermediate reasoning states in nested Boolean logic tasks.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values, and
// the numeric kernels read better with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod geometry;
pub mod logic;
pub mod pipeline;
pub mod probes;
pub mod sample;
pub mod scalar;
pub mod seed;
pub mod store;
pub mod synth;
pub mod transcript;

pub use scalar::Scalar;

pub type ManifoldSample64 = sample::ManifoldSample<f64>;
pub type ManifoldSample32 = sample::ManifoldSample<f32>;
pub type CapacityEstimate64 = geometry::CapacityEstimate<f64>;
pub type CapacityEstimate32 = geometry::CapacityEstimate<f32>;
pub type ProbeModel64 = probes::ProbeModel<f64>;
pub type ProbeModel32 = probes::ProbeModel<f32>;
