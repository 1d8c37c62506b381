//! Hard-margin linear SVM via SMO on the dual.
//!
//! The box constraint `C` is large enough that any bounded multiplier means the
//! data could not be separated; working-set selection follows the
//! second-order rule of Fan, Chen and Lin.

use ndarray::{Array1, Array2, Axis};

use super::{ProbeError, ProbeKind, ProbeModel, TrainMeta};
use crate::sample::ManifoldSample;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Stopping threshold on the maximal KKT violation.
    pub tolerance: f64,
    pub max_iter: Option<usize>,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1e8, tolerance: 1e-6, max_iter: None }
    }
}

const TAU: f64 = 1e-12;

/// Raw dual solution in the centred coordinates used internally.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Array1<f64>,
    /// `w` before normalization.
    pub w: Array1<f64>,
    pub b: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the dual for points `x` (rows) with labels `y ∈ {±1}`.
pub fn solve_dual(x: &Array2<f64>, y: &[f64], cfg: &SvmConfig) -> DualSolution {
    let n = x.nrows();
    let k = x.dot(&x.t());
    let c = cfg.c;
    let max_iter = cfg.max_iter.unwrap_or_else(|| (1000 * n).max(100_000));
    let mut alpha = Array1::<f64>::zeros(n);
    let mut grad = Array1::<f64>::from_elem(n, -1.0);
    let q = |i: usize, j: usize| y[i] * y[j] * k[[i, j]];

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        // i: maximal violator in I_up.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            let up = (y[t] > 0.0 && alpha[t] < c) || (y[t] < 0.0 && alpha[t] > 0.0);
            if up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = t;
            }
        }
        // j: second-order choice in I_low.
        let mut gmin = f64::INFINITY;
        let mut best = f64::INFINITY;
        let mut j_sel = usize::MAX;
        for t in 0..n {
            let low = (y[t] > 0.0 && alpha[t] > 0.0) || (y[t] < 0.0 && alpha[t] < c);
            if !low {
                continue;
            }
            let v = -y[t] * grad[t];
            gmin = gmin.min(v);
            if i_sel != usize::MAX && v < gmax {
                let b = gmax - v;
                let a = k[[i_sel, i_sel]] + k[[t, t]] - 2.0 * k[[i_sel, t]];
                let obj = -(b * b) / if a > 0.0 { a } else { TAU };
                if obj <= best {
                    best = obj;
                    j_sel = t;
                }
            }
        }
        if i_sel == usize::MAX || j_sel == usize::MAX || gmax - gmin < cfg.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (k[[i, i]] + k[[j, j]] - 2.0 * k[[i, j]]).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (k[[i, i]] + k[[j, j]] - 2.0 * k[[i, j]]).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(i, t) * di + q(j, t) * dj;
        }
        if alpha[i] >= c || alpha[j] >= c {
            // A multiplier at the box means a margin violation that C cannot price away.
            break;
        }
    }

    // Bias from free multipliers, else the midpoint of the feasible interval.
    let (mut sum, mut n_free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            n_free += 1;
        } else {
            let at_upper = alpha[t] >= c;
            if (at_upper && y[t] < 0.0) || (!at_upper && y[t] > 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
    }
    let rho = if n_free > 0 { sum / n_free as f64 } else { (ub + lb) / 2.0 };
    let coef: Array1<f64> = alpha.iter().zip(y).map(|(a, yy)| a * yy).collect();
    let w = x.t().dot(&coef);
    DualSolution { alpha, w, b: -rho, iterations, converged }
}

fn to_f64<T: Scalar>(sample: &ManifoldSample<T>) -> (Array2<f64>, Vec<f64>) {
    (sample.points().mapv(|v| v.as_f64()), sample.labels().iter().map(|&l| l as f64).collect())
}

/// Maximum-margin separator. The stored normal is unit length, oriented so
/// that `w·x + b > 0` on the +1 class, and `margin` is the geometric margin.
pub fn fit_hard_margin<T: Scalar>(sample: &ManifoldSample<T>, cfg: &SvmConfig) -> Result<ProbeModel<T>, ProbeError> {
    let (x, y) = to_f64(sample);
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let xc = &x - &mean;
    let sol = solve_dual(&xc, &y, cfg);
    let norm = sol.w.dot(&sol.w).sqrt();
    let n_errors = (0..xc.nrows())
        .filter(|&i| y[i] * (xc.row(i).dot(&sol.w) + sol.b) <= 0.0)
        .count();
    let at_bound = sol.alpha.iter().any(|&a| a >= cfg.c);
    if norm == 0.0 || !norm.is_finite() || n_errors > 0 || at_bound {
        return Err(ProbeError::NotSeparable { training_errors: n_errors, iterations: sol.iterations });
    }
    if !sol.converged {
        log::warn!("hard-margin SMO hit its iteration cap ({}); margin may be suboptimal", sol.iterations);
    }
    let w_unit = sol.w.mapv(|v| v / norm);
    // Shift the bias back to raw coordinates.
    let b = (sol.b - sol.w.dot(&mean)) / norm;
    Ok(ProbeModel {
        kind: ProbeKind::HardSvm,
        weights: w_unit.mapv(T::of),
        bias: T::of(b),
        margin: Some(T::of(1.0 / norm)),
        train_meta: TrainMeta::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::SampleMeta;
    use ndarray::array;

    fn sample(points: Array2<f64>, labels: Vec<i8>) -> ManifoldSample<f64> {
        ManifoldSample::new(points, labels, SampleMeta::default()).unwrap()
    }

    #[test]
    fn antipodal_pair() {
        let mut p = Array2::zeros((2, 5));
        p[[0, 0]] = 1.0;
        p[[1, 0]] = -1.0;
        let m = fit_hard_margin(&sample(p, vec![1, -1]), &SvmConfig::default()).unwrap();
        assert!(m.weights[0] >= 0.999);
        assert!(m.bias.abs() < 1e-9);
        assert!((m.margin.unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn xor_is_not_separable() {
        let p = array![[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
        let r = fit_hard_margin(&sample(p, vec![1, 1, -1, -1]), &SvmConfig::default());
        assert!(matches!(r, Err(ProbeError::NotSeparable { .. })), "{r:?}");
    }

    #[test]
    fn offset_clusters_need_bias() {
        let p = array![[10.0, 0.0], [10.0, 1.0], [12.0, 0.0], [12.0, 1.0]];
        let m = fit_hard_margin(&sample(p.clone(), vec![-1, -1, 1, 1]), &SvmConfig::default()).unwrap();
        assert!((m.margin.unwrap() - 1.0).abs() < 1e-6);
        assert!((m.weights[0] - 1.0).abs() < 1e-6);
        assert!((m.bias + 11.0).abs() < 1e-6);
        assert_eq!(m.predict(p.view()), vec![false, false, true, true]);
    }
}
