//! Intrinsic (TwoNN) and linear (participation ratio) dimensionality.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GeometryError;
use crate::scalar::Scalar;

pub const TWONN_MIN_POINTS: usize = 10;
/// Points closer than this fraction of the median pairwise distance are
/// treated as duplicates.
pub const DUPLICATE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DimMethod {
    TwoNn,
    Pr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DimEstimate<T> {
    pub method: DimMethod,
    pub value: T,
    pub n_points: usize,
    /// Points discarded as duplicates (TwoNN only).
    pub n_dropped: usize,
}

fn sq_dist<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Maximum-likelihood TwoNN: `d̂ = N / Σ ln(r₂/r₁)`.
pub fn twonn_id<T: Scalar>(points: ArrayView2<'_, T>) -> Result<DimEstimate<T>, GeometryError> {
    let n = points.nrows();
    if n < TWONN_MIN_POINTS {
        return Err(GeometryError::TooFewPoints { needed: TWONN_MIN_POINTS, got: n });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }

    // Median pairwise distance sets the duplicate threshold.
    let mut all: Vec<T> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(points.row(i), points.row(j)))
        .collect();
    let mid = all.len() / 2;
    let (_, median_sq, _) = all.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite"));
    let eps = T::of(DUPLICATE_EPS) * median_sq.sqrt();
    let eps_sq = eps * eps;

    let mut kept: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        if kept.iter().all(|&j| sq_dist(points.row(i), points.row(j)) > eps_sq) {
            kept.push(i);
        }
    }
    let n_dropped = n - kept.len();
    if n_dropped > 0 {
        log::warn!("twonn: dropped {n_dropped} duplicate points");
    }
    if kept.len() < TWONN_MIN_POINTS {
        return Err(GeometryError::TooFewPoints { needed: TWONN_MIN_POINTS, got: kept.len() });
    }

    let log_mu: Vec<f64> = kept
        .par_iter()
        .map(|&i| {
            let (mut r1, mut r2) = (T::infinity(), T::infinity());
            for &j in &kept {
                if i == j {
                    continue;
                }
                let d = sq_dist(points.row(i), points.row(j));
                if d < r1 {
                    r2 = r1;
                    r1 = d;
                } else if d < r2 {
                    r2 = d;
                }
            }
            0.5 * (r2.as_f64() / r1.as_f64()).ln()
        })
        .collect();
    let total: f64 = log_mu.iter().sum();
    if !(total > 0.0) {
        return Err(GeometryError::Degenerate("all neighbour ratios equal one".into()));
    }
    Ok(DimEstimate {
        method: DimMethod::TwoNn,
        value: T::of(kept.len() as f64 / total),
        n_points: kept.len(),
        n_dropped,
    })
}

/// `(Σλ)² / Σλ²` over covariance eigenvalues, computed as
/// `tr(C)² / ‖C‖_F²` on whichever of the covariance or Gram matrix is smaller.
pub fn participation_ratio<T: Scalar>(points: ArrayView2<'_, T>) -> Result<DimEstimate<T>, GeometryError> {
    let (n, d) = points.dim();
    if n < 2 {
        return Err(GeometryError::TooFewPoints { needed: 2, got: n });
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let centered: Array2<T> = &points - &mean;
    // Nonzero spectra of XᵀX and XXᵀ coincide; the 1/(n-1) factor cancels.
    let m = if d <= n { centered.t().dot(&centered) } else { centered.dot(&centered.t()) };
    let trace: f64 = m.diag().iter().map(|v| v.as_f64()).sum();
    let frob: f64 = m.iter().map(|v| v.as_f64().powi(2)).sum();
    if !(trace > 0.0) || !(frob > 0.0) {
        return Err(GeometryError::ZeroVariance);
    }
    Ok(DimEstimate { method: DimMethod::Pr, value: T::of(trace * trace / frob), n_points: n, n_dropped: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use crate::seed::stream_rng;

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 0);
        Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn rank_one_cloud() {
        let u = Array1::from(vec![0.3, -0.2, 0.9, 0.1]);
        let mut rng = stream_rng(1, 0);
        let pts = Array2::from_shape_fn((50, 4), |(_, j)| u[j]);
        let scales: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pts = Array2::from_shape_fn((50, 4), |(i, j)| pts[[i, j]] * scales[i]);
        let pr = participation_ratio(pts.view()).unwrap();
        assert!((pr.value - 1.0).abs() < 1e-9, "{}", pr.value);
    }

    #[test]
    fn pr_is_scale_and_shift_invariant() {
        let pts = gaussian(200, 5, 2);
        let a = participation_ratio(pts.view()).unwrap().value;
        let moved = pts.mapv(|v| 3.0 * v + 7.0);
        let b = participation_ratio(moved.view()).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn pr_wide_matrix_uses_gram() {
        let pts = gaussian(6, 40, 3);
        let pr = participation_ratio(pts.view()).unwrap().value;
        assert!((1.0..=5.0 + 1e-9).contains(&pr));
        let tall = participation_ratio(pts.t().as_standard_layout().t()).unwrap().value;
        assert!((pr - tall).abs() < 1e-12);
    }

    #[test]
    fn pr_zero_variance() {
        let pts = Array2::from_elem((5, 3), 1.0);
        assert_eq!(participation_ratio(pts.view()).unwrap_err(), GeometryError::ZeroVariance);
    }

    #[test]
    fn twonn_duplicates_only() {
        let base = gaussian(8, 3, 4);
        let mut pts = Array2::zeros((16, 3));
        for i in 0..8 {
            pts.row_mut(2 * i).assign(&base.row(i));
            pts.row_mut(2 * i + 1).assign(&base.row(i));
        }
        assert!(matches!(twonn_id(pts.view()), Err(GeometryError::TooFewPoints { .. })));
    }

    #[test]
    fn twonn_drops_duplicates() {
        let mut pts = gaussian(60, 3, 5);
        let r0 = pts.row(0).to_owned();
        pts.row_mut(1).assign(&r0);
        let est = twonn_id(pts.view()).unwrap();
        assert_eq!(est.n_dropped, 1);
        assert_eq!(est.n_points, 59);
    }

    #[test]
    fn twonn_too_few() {
        let pts = gaussian(5, 3, 6);
        assert!(matches!(twonn_id(pts.view()), Err(GeometryError::TooFewPoints { needed: 10, got: 5 })));
    }

    #[test]
    fn twonn_plane_in_ambient_space() {
        let mut rng = stream_rng(7, 0);
        let pts = Array2::from_shape_fn((800, 6), |(_, j)| if j < 2 { rng.random::<f64>() } else { 0.0 });
        let est = twonn_id(pts.view()).unwrap();
        assert!((1.7..2.4).contains(&est.value), "{}", est.value);
    }
}
