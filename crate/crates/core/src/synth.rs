//! Synthetic data with known ground truth.
//!
//! * [`gen_gaussian_clusters`]: two labelled isotropic clouds at a chosen separation.
//! * [`gen_pulse_dump`]: an activation dump over real task transcripts in which
//!   each node's label is written along a fixed direction with a planted gain
//!   schedule over tokens and layers.
//! * [`brute_nstar_small`]: a quasi-Monte Carlo `N*` for tiny cones using exact
//!   face enumeration instead of an iterative solver.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::logic::{TaskInstance, TreeLayout};
use crate::sample::{ManifoldSample, SampleError, SampleMeta};
use crate::scalar::Scalar;
use crate::seed::{derive, stream_rng};
use crate::store::{ActivationDump, AttentionRows, AttentionSpec, RowKey, RowPolicy, StoreError, TaskActivations};
use crate::transcript::{
    align_anchors, event_line_span, parse_transcript, pretokenize, render_reference_cot, tokens_in_range, AnchorKind,
    CanonicalLayout, Phase, PromptVariant,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("task {task_id}: {msg}")]
    Mismatch { task_id: String, msg: String },
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn random_unit(d: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// `D` points, alternating labels `+1, −1, …`, centred at `±(separation/2)·u`
/// for a seeded random unit `u`, with unit-variance isotropic noise.
pub fn gen_gaussian_clusters<T: Scalar>(separation: f64, d: usize, n: usize, seed: u64) -> Result<ManifoldSample<T>, SynthError> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(SynthError::InvalidArgument(format!("D must be even and at least 2, got {n}")));
    }
    if d < 2 {
        return Err(SynthError::InvalidArgument(format!("d must be at least 2, got {d}")));
    }
    let u = random_unit(d, &mut stream_rng(derive(seed, &[0]), 0));
    let mut points = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        let mut rng = stream_rng(derive(seed, &[1]), i as u64);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            points[[i, j]] = T::of(y * 0.5 * separation * u[j] + z);
        }
        labels.push(y as i8);
    }
    Ok(ManifoldSample::new(points, labels, SampleMeta::default())?)
}

/// Gains for one node. Anchor positions are ordinals into the task's anchor
/// list; the pulse is centred on the token of `solve_anchor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePulse {
    pub node_id: u32,
    pub solve_anchor: usize,
    #[serde(default)]
    pub recall_anchors: Vec<usize>,
    pub g_peak: f64,
    /// Level held after the pulse.
    #[serde(default)]
    pub g_tail: f64,
    /// Level held before the pulse.
    #[serde(default)]
    pub g_base: f64,
    #[serde(default)]
    pub recall_gain: f64,
    /// Raised-cosine support in tokens.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAttention {
    pub layers: Vec<usize>,
    pub n_heads: usize,
    /// Extra unnormalized weight on tokens of a direct child's Result line.
    pub child_boost: f64,
    /// Uniform jitter added to every weight.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub sigma: f64,
    pub d_model: usize,
    pub n_layers: usize,
    /// Per-layer multiplier on every node gain.
    pub layer_profile: Vec<f64>,
    /// Layers where the post-pulse level drops to zero instead of `g_tail`.
    #[serde(default)]
    pub suppress_layers: Vec<usize>,
    /// Gram–Schmidt the node directions (needs `nodes ≤ d_model`).
    #[serde(default)]
    pub orthogonal: bool,
    pub nodes: Vec<NodePulse>,
    #[serde(default)]
    pub attention: Option<SynthAttention>,
}

impl PulseSchedule {
    /// Every node of a height-`h` tree peaks at its own solve Result anchor
    /// and is recalled at its parent's Logic anchor and its summary line.
    #[allow(clippy::too_many_arguments)]
    pub fn canonical(
        height: u32,
        d_model: usize,
        n_layers: usize,
        sigma: f64,
        g_peak: f64,
        g_tail: f64,
        recall_gain: f64,
        width: f64,
    ) -> Result<Self, SynthError> {
        let layout = TreeLayout::new(height).map_err(|e| SynthError::InvalidArgument(e.to_string()))?;
        let canon = CanonicalLayout::new(layout);
        let nodes = (1..=layout.node_count())
            .map(|id| {
                let mut recall_anchors: Vec<usize> = canon.recall(id, AnchorKind::Logic).into_iter().collect();
                recall_anchors.extend(canon.summary(id));
                NodePulse {
                    node_id: id,
                    solve_anchor: canon.solve(id, AnchorKind::Result).expect("node in layout"),
                    recall_anchors,
                    g_peak,
                    g_tail,
                    g_base: 0.0,
                    recall_gain,
                    width,
                }
            })
            .collect();
        Ok(Self {
            sigma,
            d_model,
            n_layers,
            layer_profile: vec![1.0; n_layers],
            suppress_layers: Vec::new(),
            orthogonal: false,
            nodes,
            attention: None,
        })
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSchedule(m));
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        if self.d_model == 0 || self.n_layers == 0 {
            return bad("d_model and n_layers must be positive".into());
        }
        if self.layer_profile.len() != self.n_layers {
            return bad(format!("layer_profile has {} entries for {} layers", self.layer_profile.len(), self.n_layers));
        }
        if let Some(&l) = self.suppress_layers.iter().find(|&&l| l >= self.n_layers) {
            return bad(format!("suppressed layer {l} out of range"));
        }
        if self.orthogonal && self.nodes.len() > self.d_model {
            return bad(format!("{} orthogonal directions in {} dimensions", self.nodes.len(), self.d_model));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if !seen.insert(n.node_id) {
                return bad(format!("node {} listed twice", n.node_id));
            }
            if !(n.g_peak > n.g_tail && n.g_tail >= 0.0 && n.g_base >= 0.0 && n.recall_gain >= 0.0) {
                return bad(format!("node {}: need g_peak > g_tail >= 0 and non-negative gains", n.node_id));
            }
            if !(n.width >= 1.0) {
                return bad(format!("node {}: width must be at least one token", n.node_id));
            }
        }
        if let Some(a) = &self.attention {
            if a.n_heads == 0 || a.layers.iter().any(|&l| l >= self.n_layers) {
                return bad("attention layers out of range or zero heads".into());
            }
        }
        Ok(())
    }

    fn directions(&self, seed: u64) -> Vec<Array1<f64>> {
        let mut rng = stream_rng(derive(seed, &[0]), 0);
        let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(self.nodes.len());
        for _ in &self.nodes {
            let mut v = random_unit(self.d_model, &mut rng);
            if self.orthogonal {
                loop {
                    for u in &dirs {
                        let c = v.dot(u);
                        v.scaled_add(-c, u);
                    }
                    let n = v.dot(&v).sqrt();
                    if n > 1e-6 {
                        v /= n;
                        break;
                    }
                    v = random_unit(self.d_model, &mut rng);
                }
            }
            dirs.push(v);
        }
        dirs
    }
}

/// Raised cosine with total support `width` tokens, 1 at the centre.
pub fn raised_cosine(offset: f64, width: f64) -> f64 {
    let half = width / 2.0;
    if offset.abs() >= half {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * offset / half).cos())
    }
}

struct ResolvedPulse<'a> {
    spec: &'a NodePulse,
    solve_token: f64,
    recall_tokens: Vec<f64>,
}

impl ResolvedPulse<'_> {
    fn gain(&self, t: usize, suppressed: bool) -> f64 {
        let t = t as f64;
        let p = self.spec;
        let level = if t < self.solve_token {
            p.g_base
        } else if suppressed {
            0.0
        } else {
            p.g_tail
        };
        let peak = p.g_peak * raised_cosine(t - self.solve_token, p.width);
        let recall: f64 = self.recall_tokens.iter().map(|&r| raised_cosine(t - r, p.width)).sum();
        level.max(peak) + p.recall_gain * recall
    }
}

/// Builds the planted dump. Every task gets its reference transcript,
/// tokenized with [`pretokenize`], with aligned anchors; residual vectors
/// follow `x(t, l) = Σ_n profile[l]·g_n(t)·y_n·u_n + σ·ε`.
pub fn gen_pulse_dump(schedule: &PulseSchedule, tasks: &[TaskInstance], seed: u64) -> Result<ActivationDump, SynthError> {
    schedule.validate()?;
    if tasks.is_empty() {
        return Err(SynthError::InvalidArgument("no tasks".into()));
    }
    let dirs = schedule.directions(seed);
    let d = schedule.d_model;
    let n_layers = schedule.n_layers;
    let suppressed: Vec<bool> = (0..n_layers).map(|l| schedule.suppress_layers.contains(&l)).collect();

    let built: Vec<Result<TaskActivations, SynthError>> = tasks
        .par_iter()
        .enumerate()
        .map(|(ti, task)| {
            let mismatch = |msg: String| SynthError::Mismatch { task_id: task.task_id.clone(), msg };
            let text = render_reference_cot(task, PromptVariant::Normal);
            let tokens = pretokenize(&text);
            let anchors = align_anchors(&parse_transcript(&text), &tokens).map_err(|e| mismatch(e.to_string()))?;
            let token_of = |ord: usize| -> Result<f64, SynthError> {
                anchors
                    .get(ord)
                    .and_then(|a| a.token_index)
                    .map(|t| t as f64)
                    .ok_or_else(|| mismatch(format!("anchor ordinal {ord} beyond {} anchors", anchors.len())))
            };
            let mut pulses = Vec::with_capacity(schedule.nodes.len());
            let mut labels = Vec::with_capacity(schedule.nodes.len());
            for p in &schedule.nodes {
                let y = task.truth.get(p.node_id).ok_or_else(|| mismatch(format!("no node {}", p.node_id)))?;
                labels.push(if y { 1.0 } else { -1.0 });
                pulses.push(ResolvedPulse {
                    spec: p,
                    solve_token: token_of(p.solve_anchor)?,
                    recall_tokens: p.recall_anchors.iter().map(|&o| token_of(o)).collect::<Result<_, _>>()?,
                });
            }

            let n_tokens = tokens.len();
            let mut acts = vec![0f32; n_tokens * n_layers * d];
            let mut rng = stream_rng(derive(seed, &[1]), ti as u64);
            let mut x = Array1::<f64>::zeros(d);
            for t in 0..n_tokens {
                for l in 0..n_layers {
                    x.fill(0.0);
                    let prof = schedule.layer_profile[l];
                    if prof != 0.0 {
                        for ((p, u), &y) in pulses.iter().zip(&dirs).zip(&labels) {
                            let g = prof * p.gain(t, suppressed[l]);
                            if g != 0.0 {
                                x.scaled_add(g * y, u);
                            }
                        }
                    }
                    let off = (t * n_layers + l) * d;
                    for j in 0..d {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        acts[off + j] = (x[j] + schedule.sigma * z) as f32;
                    }
                }
            }

            let attention = match &schedule.attention {
                None => None,
                Some(cfg) => Some(synth_attention(cfg, task, &text, &tokens, &anchors, derive(seed, &[2, ti as u64]))?),
            };
            Ok(TaskActivations { task_id: task.task_id.clone(), n_tokens, acts, tokens, anchors, attention })
        })
        .collect();
    let tasks_out = built.into_iter().collect::<Result<Vec<_>, _>>()?;

    let spec = schedule.attention.as_ref().map(|a| AttentionSpec {
        layers: a.layers.clone(),
        n_heads: a.n_heads,
        row_policy: RowPolicy::LogicLines,
    });
    Ok(ActivationDump::new("synthetic-pulse", "planted", n_layers, d, spec, tasks_out)?)
}

/// Causal rows for every solve Logic-line token: uniform weights plus jitter,
/// with extra mass on the Result lines of the node's direct children.
fn synth_attention(
    cfg: &SynthAttention,
    task: &TaskInstance,
    text: &str,
    tokens: &[crate::transcript::TokenSpan],
    anchors: &[crate::transcript::AnchorEvent],
    seed: u64,
) -> Result<AttentionRows, SynthError> {
    let layout = task.tree.layout();
    let line_tokens = |node: u32, kind: AnchorKind| -> Vec<usize> {
        anchors
            .iter()
            .find(|a| a.phase == Phase::Solve && a.kind == kind && a.node_id == Some(node))
            .map(|a| {
                let (s, e) = event_line_span(text, a);
                tokens_in_range(tokens, s, e)
            })
            .unwrap_or_default()
    };
    let n = tokens.len();
    let mut keys = Vec::new();
    let mut boosted: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    for node in 1..=layout.node_count() {
        let children: Vec<usize> = match layout.children_of(node) {
            Some((l, r)) => [l, r].into_iter().flat_map(|c| line_tokens(c, AnchorKind::Result)).collect(),
            None => Vec::new(),
        };
        for tok in line_tokens(node, AnchorKind::Logic) {
            boosted.insert(tok, children.clone());
        }
    }
    let mut query_tokens: Vec<usize> = boosted.keys().copied().collect();
    query_tokens.sort_unstable();
    for &l in &cfg.layers {
        for h in 0..cfg.n_heads {
            for &t in &query_tokens {
                keys.push(RowKey { layer: l, head: h, token: t });
            }
        }
    }
    let mut rng = stream_rng(seed, 0);
    let rows = AttentionRows::from_fn(n, keys, |k| {
        let mut w = vec![0f64; n];
        for wj in w.iter_mut().take(k.token + 1) {
            *wj = 1.0 + cfg.jitter * rng.random::<f64>();
        }
        for &j in &boosted[&k.token] {
            if j <= k.token {
                w[j] += cfg.child_boost * (1.0 + cfg.jitter * rng.random::<f64>());
            }
        }
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| (v / s) as f32).collect()
    })?;
    Ok(rows)
}

pub const BRUTE_MAX_DIM: usize = 3;
pub const BRUTE_MAX_GENERATORS: usize = 4;

/// Solves a small dense system by Gaussian elimination with partial
/// pivoting; `None` if (numerically) singular.
fn solve_small(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Exact `‖Π_V(t)‖²` for a tiny cone: the projection is the nearest of the
/// least-squares projections onto the spans of generator subsets that land
/// inside the cone.
pub fn exact_small_projection_sq(generators: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> f64 {
    let m = generators.nrows();
    let mut best_dist = t.dot(&t);
    let mut best_sq = 0.0;
    for mask in 1u32..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|&i| mask & (1 << i) != 0).collect();
        let a: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| generators.row(i).dot(&generators.row(j))).collect())
            .collect();
        let b: Vec<f64> = idx.iter().map(|&i| generators.row(i).dot(&t)).collect();
        let Some(c) = solve_small(a, b) else { continue };
        if c.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut p = Array1::<f64>::zeros(t.len());
        for (&i, &ci) in idx.iter().zip(&c) {
            p.scaled_add(ci.max(0.0), &generators.row(i));
        }
        let r = &t - &p;
        let dist = r.dot(&r);
        if dist < best_dist {
            best_dist = dist;
            best_sq = p.dot(&p);
        }
    }
    best_sq
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// High-precision `E‖Π_V(t)‖²` for `d ≤ 3`, at most 4 generators, from
/// `n_draws` Halton points mapped through the normal quantile function.
pub fn brute_nstar_small(generators: ArrayView2<'_, f64>, n_draws: usize) -> Result<f64, SynthError> {
    let (m, d) = generators.dim();
    if d == 0 || d > BRUTE_MAX_DIM || m == 0 || m > BRUTE_MAX_GENERATORS {
        return Err(SynthError::InvalidArgument(format!(
            "oracle supports d ≤ {BRUTE_MAX_DIM} and at most {BRUTE_MAX_GENERATORS} generators, got d={d}, D={m}"
        )));
    }
    if n_draws == 0 {
        return Err(SynthError::InvalidArgument("n_draws must be positive".into()));
    }
    const BASES: [u64; BRUTE_MAX_DIM] = [2, 3, 5];
    let normal = Normal::standard();
    const CHUNK: u64 = 4096;
    let n = n_draws as u64;
    // Fixed chunks summed in order keep the result independent of scheduling.
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            (c * CHUNK + 1..=((c + 1) * CHUNK).min(n))
                .map(|i| {
                    let t: Array1<f64> = (0..d).map(|k| normal.inverse_cdf(radical_inverse(i, BASES[k]))).collect();
                    exact_small_projection_sq(generators, t.view())
                })
                .sum::<f64>()
        })
        .collect();
    Ok(partial.iter().sum::<f64>() / n_draws as f64)
}
