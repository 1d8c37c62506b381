//! Manifold capacity from Gaussian projections onto the label-signed cone.
//!
//! For points `x_i` with labels `y_i = ±1`, the cone `V` is generated by the
//! vectors `y_i x_i`. The effective dimension is `N* = E‖Π_V(t)‖²` with
//! `t ~ N(0, I_d)`, estimated by Monte Carlo, and the capacity for a single
//! dichotomy (`P = 2`) is `α = 2 / N*`.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cone::{ConeProjector, ConeSpec, DEFAULT_TOLERANCE};
use super::GeometryError;
use crate::sample::ManifoldSample;
use crate::scalar::Scalar;
use crate::seed::stream_rng;

pub const DEFAULT_N_MC: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    None,
    #[default]
    GrandMean,
}

impl std::str::FromStr for Centering {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Centering::None),
            "grand-mean" | "grand_mean" | "mean" => Ok(Centering::GrandMean),
            other => Err(format!("unknown centering {other:?} (expected none|grand-mean)")),
        }
    }
}

impl std::fmt::Display for Centering {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Centering::None => "none",
            Centering::GrandMean => "grand-mean",
        })
    }
}

/// Optional rescaling applied before centering. Scaling a single generator
/// leaves the cone unchanged, so only pre-centering rescaling matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    /// Each point divided by its Euclidean norm.
    UnitNorm,
    /// Each coordinate scaled to unit variance across points.
    Standardize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapacityConfig {
    pub n_mc: usize,
    pub seed: u64,
    pub centering: Centering,
    pub normalization: Normalization,
    pub tolerance: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            n_mc: DEFAULT_N_MC,
            seed: 0,
            centering: Centering::GrandMean,
            normalization: Normalization::None,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NStarEstimate<T> {
    pub n_star: T,
    /// Standard error of the mean.
    pub std_error: T,
    pub n_mc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CapacityEstimate<T> {
    pub alpha: T,
    pub n_star: T,
    pub std_error: T,
    pub n_mc: usize,
    pub seed: u64,
    pub centering: Centering,
}

/// Monte Carlo `E‖Π_V(t)‖²`. Draw `i` uses its own stream `(seed, i)`, so the
/// result does not depend on how draws are scheduled across threads.
pub fn estimate_nstar<T: Scalar>(
    projector: &ConeProjector<T>,
    n_mc: usize,
    seed: u64,
) -> Result<NStarEstimate<T>, GeometryError> {
    if n_mc < 2 {
        return Err(GeometryError::InvalidArgument(format!("n_mc must be at least 2, got {n_mc}")));
    }
    let d = projector.dim();
    let values: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let t: Array1<T> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(z)
                })
                .collect();
            projector.project_sq_norm(t.view()).map(|v| v.as_f64())
        })
        .collect::<Result<_, _>>()?;
    let n = n_mc as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(NStarEstimate { n_star: T::of(mean), std_error: T::of((var / n).sqrt()), n_mc })
}

/// Applies normalization then centering and returns the label-signed
/// generators, dropping rows that are exactly zero.
pub fn cone_generators<T: Scalar>(
    sample: &ManifoldSample<T>,
    centering: Centering,
    normalization: Normalization,
) -> Result<Array2<T>, GeometryError> {
    let mut pts = sample.points().to_owned();
    match normalization {
        Normalization::None => {}
        Normalization::UnitNorm => {
            for mut row in pts.axis_iter_mut(Axis(0)) {
                let n = row.dot(&row).sqrt();
                if n > T::zero() {
                    row.mapv_inplace(|v| v / n);
                }
            }
        }
        Normalization::Standardize => {
            let mean = pts.mean_axis(Axis(0)).expect("non-empty");
            let n = T::of(pts.nrows() as f64);
            for (j, mut col) in pts.axis_iter_mut(Axis(1)).enumerate() {
                let var = col.iter().map(|&v| (v - mean[j]) * (v - mean[j])).sum::<T>() / n;
                if var > T::zero() {
                    let sd = var.sqrt();
                    col.mapv_inplace(|v| v / sd);
                }
            }
        }
    }
    if centering == Centering::GrandMean {
        let mean = pts.mean_axis(Axis(0)).expect("non-empty");
        pts = &pts - &mean;
    }
    let keep: Vec<usize> = (0..pts.nrows())
        .filter(|&i| pts.row(i).iter().any(|v| !v.is_zero()))
        .collect();
    if keep.is_empty() {
        return Err(GeometryError::Degenerate("all points coincide after preprocessing".into()));
    }
    let mut gens = pts.select(Axis(0), &keep);
    for (r, &i) in keep.iter().enumerate() {
        let y = sample.label(i);
        gens.row_mut(r).mapv_inplace(|v| v * y);
    }
    Ok(gens)
}

/// `α = 2 / N*` for one labelled sample.
pub fn capacity<T: Scalar>(
    sample: &ManifoldSample<T>,
    config: &CapacityConfig,
) -> Result<CapacityEstimate<T>, GeometryError> {
    let gens = cone_generators(sample, config.centering, config.normalization)?;
    let cone = ConeSpec::new(gens, T::of(config.tolerance))?;
    let projector = ConeProjector::new(cone);
    let est = estimate_nstar(&projector, config.n_mc, config.seed)?;
    if !(est.n_star > T::zero()) {
        return Err(GeometryError::Degenerate("N* is zero".into()));
    }
    Ok(CapacityEstimate {
        alpha: T::of(2.0) / est.n_star,
        n_star: est.n_star,
        std_error: est.std_error,
        n_mc: est.n_mc,
        seed: config.seed,
        centering: config.centering,
    })
}
