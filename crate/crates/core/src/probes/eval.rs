//! Held-out probe accuracy over repeated seeded splits.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{fit_hard_margin, fit_logistic, LogisticConfig, ProbeError, ProbeKind, ProbeModel, SvmConfig};
use crate::sample::ManifoldSample;
use crate::scalar::Scalar;
use crate::seed::stream_rng;

pub const MIN_POINTS: usize = 10;
const MAX_SPLIT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub train_frac: f64,
    pub stratified: bool,
    pub seed: u64,
    pub repeats: usize,
    pub svm: SvmConfig,
    pub logistic: LogisticConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            stratified: true,
            seed: 0,
            repeats: 5,
            svm: SvmConfig::default(),
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeEval {
    pub kind: ProbeKind,
    pub accuracy: f64,
    /// Half-width `1.96·std/√repeats`.
    pub ci: f64,
    pub accuracies: Vec<f64>,
    /// Repeats where the hard-margin fit failed and logistic was used instead.
    pub n_fallback: usize,
}

/// Serialized probe result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub accuracy: f64,
    pub ci: f64,
    pub margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normal: Option<Vec<f32>>,
    pub separable: Option<bool>,
    pub n_fallback: usize,
}

fn split(labels: &[i8], cfg: &EvalConfig, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>), ProbeError> {
    let both = |idx: &[usize]| idx.iter().any(|&i| labels[i] > 0) && idx.iter().any(|&i| labels[i] < 0);
    if cfg.stratified {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for class in [1i8, -1] {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            if idx.len() < 2 {
                return Err(ProbeError::SplitFailed { attempts: 1 });
            }
            idx.shuffle(rng);
            let n_train = ((cfg.train_frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
            test.extend_from_slice(&idx[n_train..]);
            idx.truncate(n_train);
            train.extend(idx);
        }
        train.sort_unstable();
        test.sort_unstable();
        return Ok((train, test));
    }
    let n = labels.len();
    let n_train = ((cfg.train_frac * n as f64).round() as usize).clamp(1, n - 1);
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let (train, test) = idx.split_at(n_train);
        if both(train) && both(test) {
            let (mut train, mut test) = (train.to_vec(), test.to_vec());
            train.sort_unstable();
            test.sort_unstable();
            return Ok((train, test));
        }
    }
    Err(ProbeError::SplitFailed { attempts: MAX_SPLIT_ATTEMPTS })
}

fn fit<T: Scalar>(kind: ProbeKind, s: &ManifoldSample<T>, cfg: &EvalConfig) -> Result<(ProbeModel<T>, bool), ProbeError> {
    match kind {
        ProbeKind::Logistic => Ok((fit_logistic(s, &cfg.logistic)?, false)),
        ProbeKind::HardSvm => match fit_hard_margin(s, &cfg.svm) {
            Ok(m) => Ok((m, false)),
            Err(ProbeError::NotSeparable { .. }) => Ok((fit_logistic(s, &cfg.logistic)?, true)),
            Err(e) => Err(e),
        },
    }
}

/// Mean held-out accuracy over `repeats` seeded splits. Repeat `r` draws
/// its split from stream `(seed, r)`.
pub fn eval_probe<T: Scalar>(kind: ProbeKind, sample: &ManifoldSample<T>, cfg: &EvalConfig) -> Result<ProbeEval, ProbeError> {
    if sample.n_points() < MIN_POINTS {
        return Err(ProbeError::TooFewPoints { needed: MIN_POINTS, got: sample.n_points() });
    }
    if cfg.repeats == 0 || !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(ProbeError::InvalidArgument("repeats must be positive and train_frac in (0, 1)".into()));
    }
    let mut accuracies = Vec::with_capacity(cfg.repeats);
    let mut n_fallback = 0;
    for r in 0..cfg.repeats {
        let mut rng = stream_rng(cfg.seed, r as u64);
        let (train_idx, test_idx) = split(sample.labels(), cfg, &mut rng)?;
        let train = sample.subset(&train_idx)?;
        let (model, fell_back) = fit(kind, &train, cfg)?;
        n_fallback += fell_back as usize;
        let test_pts = sample.points().select(ndarray::Axis(0), &test_idx);
        let pred = model.predict(test_pts.view());
        let hits = pred.iter().zip(&test_idx).filter(|(&p, &i)| p == (sample.labels()[i] > 0)).count();
        accuracies.push(hits as f64 / test_idx.len() as f64);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let std = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ProbeEval { kind, accuracy: mean, ci: 1.96 * std / n.sqrt(), accuracies, n_fallback })
}

/// Held-out evaluation plus a full-sample fit for the margin and normal.
pub fn probe_report<T: Scalar>(
    kind: ProbeKind,
    sample: &ManifoldSample<T>,
    cfg: &EvalConfig,
    with_normal: bool,
) -> Result<ProbeReport, ProbeError> {
    let ev = eval_probe(kind, sample, cfg)?;
    let (model, fell_back) = fit(kind, sample, cfg)?;
    let normal = with_normal.then(|| model.unit_normal().iter().map(|&v| v as f32).collect());
    Ok(ProbeReport {
        kind,
        accuracy: ev.accuracy,
        ci: ev.ci,
        margin: model.margin.map(|m| m.as_f64()),
        normal,
        separable: (kind == ProbeKind::HardSvm).then_some(!fell_back),
        n_fallback: ev.n_fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::SampleMeta;
    use ndarray::Array2;

    fn two_blobs(n: usize, sep: f64) -> ManifoldSample<f64> {
        let pts = Array2::from_shape_fn((n, 3), |(i, j)| {
            let s = if i % 2 == 0 { sep } else { -sep };
            if j == 0 {
                s
            } else {
                ((i * 7 + j * 3) % 5) as f64 * 0.1
            }
        });
        let labels = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        ManifoldSample::new(pts, labels, SampleMeta::default()).unwrap()
    }

    #[test]
    fn separable_scores_one() {
        let s = two_blobs(20, 5.0);
        for kind in [ProbeKind::HardSvm, ProbeKind::Logistic] {
            let ev = eval_probe(kind, &s, &EvalConfig::default()).unwrap();
            assert_eq!(ev.accuracy, 1.0);
            assert_eq!(ev.ci, 0.0);
            assert_eq!(ev.n_fallback, 0);
        }
    }

    #[test]
    fn stratified_split_keeps_proportions() {
        let labels: Vec<i8> = (0..50).map(|i| if i < 20 { 1 } else { -1 }).collect();
        let (train, test) = split(&labels, &EvalConfig::default(), &mut stream_rng(1, 0)).unwrap();
        assert_eq!(train.len() + test.len(), 50);
        assert_eq!(train.iter().filter(|&&i| labels[i] > 0).count(), 16);
        assert_eq!(test.iter().filter(|&&i| labels[i] > 0).count(), 4);
    }

    #[test]
    fn unstratified_split_gives_up_eventually() {
        let mut labels = vec![-1i8; 30];
        labels[0] = 1;
        let cfg = EvalConfig { stratified: false, ..Default::default() };
        assert_eq!(
            split(&labels, &cfg, &mut stream_rng(2, 0)).unwrap_err(),
            ProbeError::SplitFailed { attempts: MAX_SPLIT_ATTEMPTS }
        );
    }

    #[test]
    fn too_few_points() {
        let s = two_blobs(8, 1.0);
        assert!(matches!(eval_probe(ProbeKind::Logistic, &s, &EvalConfig::default()), Err(ProbeError::TooFewPoints { .. })));
    }

    #[test]
    fn report_json_shape() {
        let s = two_blobs(20, 5.0);
        let r = probe_report(ProbeKind::HardSvm, &s, &EvalConfig::default(), true).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["kind"], "HARD_SVM");
        assert!(v["margin"].as_f64().unwrap() > 4.0);
        assert_eq!(v["normal"].as_array().unwrap().len(), 3);
    }
}
