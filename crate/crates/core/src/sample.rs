//! Labelled point clouds, the unit every estimator consumes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seed::stream_rng;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("{points} points but {labels} labels")]
    LabelCount { points: usize, labels: usize },
    #[error("labels must be +1 or -1, found {0}")]
    BadLabel(i8),
    #[error("only one label class present")]
    SingleClass,
    #[error("non-finite coordinate in row {0}")]
    NonFinite(usize),
}

/// Where a sample was taken: the labelling node, the anchor and the layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub node_id: Option<u32>,
    pub anchor: String,
    pub layer: Option<usize>,
}

/// `D` points in `d` dimensions with ±1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSample<T: Scalar> {
    points: Array2<T>,
    labels: Vec<i8>,
    pub meta: SampleMeta,
}

impl<T: Scalar> ManifoldSample<T> {
    pub fn new(points: Array2<T>, labels: Vec<i8>, meta: SampleMeta) -> Result<Self, SampleError> {
        let n = points.nrows();
        if n < 2 {
            return Err(SampleError::TooFewPoints(n));
        }
        if labels.len() != n {
            return Err(SampleError::LabelCount { points: n, labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 1 && y != -1) {
            return Err(SampleError::BadLabel(bad));
        }
        if !(labels.contains(&1) && labels.contains(&-1)) {
            return Err(SampleError::SingleClass);
        }
        if let Some((i, _)) = points
            .axis_iter(Axis(0))
            .enumerate()
            .find(|(_, row)| row.iter().any(|v| !v.is_finite()))
        {
            return Err(SampleError::NonFinite(i));
        }
        Ok(Self { points, labels, meta })
    }

    /// Builds a sample from boolean labels (`true` → +1).
    pub fn from_bools(points: Array2<T>, labels: &[bool], meta: SampleMeta) -> Result<Self, SampleError> {
        Self::new(points, labels.iter().map(|&b| if b { 1 } else { -1 }).collect(), meta)
    }

    pub fn points(&self) -> ArrayView2<'_, T> {
        self.points.view()
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> T {
        T::of(self.labels[i] as f64)
    }

    pub fn n_points(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y == 1).count();
        (pos, self.labels.len() - pos)
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.points.row(i)
    }

    /// Same points with labels permuted by a seeded shuffle.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        labels.shuffle(&mut stream_rng(seed, 0));
        Self { points: self.points.clone(), labels, meta: self.meta.clone() }
    }

    /// Rows selected by index (labels follow). Fails if a class vanishes.
    pub fn subset(&self, rows: &[usize]) -> Result<Self, SampleError> {
        let points = self.points.select(Axis(0), rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(points, labels, self.meta.clone())
    }

    /// Applies `f` to the point matrix, keeping labels and metadata.
    pub fn map_points(&self, f: impl FnOnce(ArrayView2<'_, T>) -> Array2<T>) -> Self {
        Self { points: f(self.points.view()), labels: self.labels.clone(), meta: self.meta.clone() }
    }

    pub fn mean(&self) -> Array1<T> {
        self.points.mean_axis(Axis(0)).expect("non-empty sample")
    }

    pub fn into_parts(self) -> (Array2<T>, Vec<i8>, SampleMeta) {
        (self.points, self.labels, self.meta)
    }
}
