//! Linear probes: hard-margin SVM and logistic regression, held-out
//! evaluation, and cosine analysis of the resulting hyperplane normals.

pub mod directions;
pub mod eval;
pub mod logistic;
pub mod svm;

use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sample::{ManifoldSample, SampleError};
use crate::scalar::Scalar;

pub use directions::{cosine_matrix, CosineMatrix, DirectionKey, DirectionSet, Grouping};
pub use eval::{eval_probe, probe_report, EvalConfig, ProbeEval, ProbeReport};
pub use logistic::{fit_logistic, LogisticConfig};
pub use svm::{fit_hard_margin, SvmConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("not linearly separable ({training_errors} training errors after {iterations} iterations)")]
    NotSeparable { training_errors: usize, iterations: usize },
    #[error("logistic loss became non-finite; check feature scaling")]
    NonFiniteLoss,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("could not draw a split with both classes on each side after {attempts} attempts")]
    SplitFailed { attempts: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("direction has zero or non-finite norm")]
    ZeroDirection,
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least 2 directions, got {0}")]
    TooFewDirections(usize),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProbeKind {
    HardSvm,
    Logistic,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "svm" | "hard_svm" | "hard-svm" => Ok(ProbeKind::HardSvm),
            "logistic" | "logit" => Ok(ProbeKind::Logistic),
            other => Err(format!("unknown probe kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainMeta {
    pub split_seed: Option<u64>,
    /// Per-feature standardization applied before fitting, already folded
    /// into the stored weights.
    pub mean: Option<Vec<f64>>,
    pub scale: Option<Vec<f64>>,
}

/// A linear decision rule `sign(w·x + b)` in raw feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel<T: Scalar> {
    pub kind: ProbeKind,
    pub weights: Array1<T>,
    pub bias: T,
    /// Geometric margin (hard-margin fits only).
    pub margin: Option<T>,
    pub train_meta: TrainMeta,
}

impl<T: Scalar> ProbeModel<T> {
    pub fn decision(&self, points: ArrayView2<'_, T>) -> Array1<T> {
        points.dot(&self.weights) + self.bias
    }

    /// `true` for the +1 class.
    pub fn predict(&self, points: ArrayView2<'_, T>) -> Vec<bool> {
        self.decision(points).iter().map(|&v| v > T::zero()).collect()
    }

    pub fn accuracy(&self, sample: &ManifoldSample<T>) -> f64 {
        let pred = self.predict(sample.points());
        let hits = pred.iter().zip(sample.labels()).filter(|(&p, &y)| p == (y > 0)).count();
        hits as f64 / pred.len() as f64
    }

    pub fn unit_normal(&self) -> Array1<f64> {
        let w = self.weights.mapv(|v| v.as_f64());
        let n = w.dot(&w).sqrt();
        if n > 0.0 {
            w / n
        } else {
            w
        }
    }
}
