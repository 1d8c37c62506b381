//! L2-regularized logistic regression on standardized features.

use ndarray::{Array1, Array2, Axis};

use super::{ProbeError, ProbeKind, ProbeModel, TrainMeta};
use crate::sample::ManifoldSample;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    /// Penalty on the weights (the bias is not penalized).
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { lambda: 1e-3, iterations: 500 }
    }
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

struct Problem<'a> {
    z: &'a Array2<f64>,
    y: &'a Array1<f64>,
    lambda: f64,
}

impl Problem<'_> {
    fn loss(&self, w: &Array1<f64>, b: f64) -> f64 {
        let m = self.z.dot(w) + b;
        let data: f64 = m.iter().zip(self.y).map(|(&mi, &yi)| softplus(-yi * mi)).sum::<f64>() / m.len() as f64;
        data + 0.5 * self.lambda * w.dot(w)
    }

    fn grad(&self, w: &Array1<f64>, b: f64) -> (Array1<f64>, f64) {
        let n = self.z.nrows() as f64;
        let m = self.z.dot(w) + b;
        let r: Array1<f64> = m.iter().zip(self.y).map(|(&mi, &yi)| -yi * sigmoid(-yi * mi) / n).collect();
        let gw = self.z.t().dot(&r) + &(w * self.lambda);
        (gw, r.sum())
    }
}

pub fn fit_logistic<T: Scalar>(sample: &ManifoldSample<T>, cfg: &LogisticConfig) -> Result<ProbeModel<T>, ProbeError> {
    let x = sample.points().mapv(|v| v.as_f64());
    let y: Array1<f64> = sample.labels().iter().map(|&l| l as f64).collect();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    let z = (&x - &mean) / &scale;
    let prob = Problem { z: &z, y: &y, lambda: cfg.lambda };

    let mut w = Array1::<f64>::zeros(x.ncols());
    let mut b = 0.0;
    let mut loss = prob.loss(&w, b);
    let mut step = 1.0;
    for _ in 0..cfg.iterations {
        let (gw, gb) = prob.grad(&w, b);
        let g2 = gw.dot(&gw) + gb * gb;
        if g2 < 1e-24 {
            break;
        }
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let w_new = &w - &(&gw * step);
            let b_new = b - step * gb;
            let l_new = prob.loss(&w_new, b_new);
            if !l_new.is_finite() {
                return Err(ProbeError::NonFiniteLoss);
            }
            if l_new <= loss - ARMIJO_C * step * g2 {
                w = w_new;
                b = b_new;
                loss = l_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !loss.is_finite() {
        return Err(ProbeError::NonFiniteLoss);
    }
    // Fold standardization into raw-space weights.
    let w_raw = &w / &scale;
    let b_raw = b - w_raw.dot(&mean);
    Ok(ProbeModel {
        kind: ProbeKind::Logistic,
        weights: w_raw.mapv(T::of),
        bias: T::of(b_raw),
        margin: None,
        train_meta: TrainMeta { split_seed: None, mean: Some(mean.to_vec()), scale: Some(scale.to_vec()) },
    })
}
