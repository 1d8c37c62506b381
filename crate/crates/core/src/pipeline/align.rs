//! Event-aligned traces and baseline-subtracted heatmaps.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::TraceGrid;
use super::PipelineError;
use crate::logic::TreeLayout;
use crate::seed::stream_rng;
use crate::transcript::{AnchorKind, CanonicalLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlignEvent {
    /// The node's own solve Header.
    SelfSolve,
    /// The parent's solve Header, where the node's value is read back.
    ParentRecall,
    /// The node's summary line.
    Summary,
}

impl AlignEvent {
    pub const ALL: [AlignEvent; 3] = [AlignEvent::SelfSolve, AlignEvent::ParentRecall, AlignEvent::Summary];

    pub fn slug(self) -> &'static str {
        match self {
            AlignEvent::SelfSolve => "self_solve",
            AlignEvent::ParentRecall => "parent_recall",
            AlignEvent::Summary => "summary",
        }
    }

    /// Anchor ordinal at offset 0 for `node`, if the node has this event.
    pub fn ordinal(self, canon: &CanonicalLayout, node: u32) -> Option<usize> {
        match self {
            AlignEvent::SelfSolve => canon.solve(node, AnchorKind::Header),
            AlignEvent::ParentRecall => canon.recall(node, AnchorKind::Header),
            AlignEvent::Summary => canon.summary(node),
        }
    }
}

impl std::str::FromStr for AlignEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.slug() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown event {s:?} (expected self_solve, parent_recall or summary)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { resamples: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignedTrace {
    pub event: AlignEvent,
    pub layer: usize,
    pub offsets: Vec<i64>,
    pub mean: Vec<Option<f64>>,
    pub ci_lo: Vec<Option<f64>>,
    pub ci_hi: Vec<Option<f64>>,
    /// Nodes contributing at each offset.
    pub n: Vec<usize>,
    /// Structural label of each offset, e.g. "header", "logic", "result".
    pub ticks: Vec<String>,
    /// Nodes without this event (the root for parent recall).
    pub excluded: Vec<u32>,
}

fn tick(canon: &CanonicalLayout, ordinal: i64) -> String {
    if ordinal < 0 {
        return String::new();
    }
    canon.describe(ordinal as usize).map(|(_, kind, _)| kind.to_string()).unwrap_or_default()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-node traces shifted so the event anchors coincide, averaged across
/// nodes with a percentile bootstrap over nodes.
pub fn align_traces(
    grid: &TraceGrid,
    event: AlignEvent,
    layout: TreeLayout,
    layer: usize,
    offsets: std::ops::RangeInclusive<i64>,
    boot: &BootstrapConfig,
) -> Result<AlignedTrace, PipelineError> {
    if !grid.layers.contains(&layer) {
        return Err(PipelineError::InvalidArgument(format!("layer {layer} not in grid")));
    }
    let canon = CanonicalLayout::new(layout);
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for &node in &grid.nodes {
        match event.ordinal(&canon, node) {
            Some(o) => included.push((node, o as i64)),
            None => {
                log::info!("{}: node {node} has no such event, excluded", event.slug());
                excluded.push(node);
            }
        }
    }
    if included.is_empty() {
        return Err(PipelineError::InvalidArgument(format!("no node has a {} event", event.slug())));
    }
    let offsets: Vec<i64> = offsets.collect();
    let mut out = AlignedTrace {
        event,
        layer,
        offsets: offsets.clone(),
        mean: Vec::new(),
        ci_lo: Vec::new(),
        ci_hi: Vec::new(),
        n: Vec::new(),
        ticks: Vec::new(),
        excluded,
    };
    for (k, &off) in offsets.iter().enumerate() {
        let vals: Vec<f64> = included
            .iter()
            .filter_map(|&(node, base)| {
                let ord = base + off;
                (ord >= 0).then(|| grid.value(node, ord as usize, layer)).flatten()
            })
            .collect();
        out.ticks.push(included.iter().map(|&(_, base)| tick(&canon, base + off)).find(|t| !t.is_empty()).unwrap_or_default());
        out.n.push(vals.len());
        if vals.is_empty() {
            out.mean.push(None);
            out.ci_lo.push(None);
            out.ci_hi.push(None);
            continue;
        }
        let m = vals.len();
        let mean = vals.iter().sum::<f64>() / m as f64;
        let mut rng = stream_rng(boot.seed, k as u64);
        let mut means: Vec<f64> = (0..boot.resamples)
            .map(|_| (0..m).map(|_| vals[rng.random_range(0..m)]).sum::<f64>() / m as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        let (lo, hi) = if means.is_empty() { (mean, mean) } else { (quantile(&means, 0.025), quantile(&means, 0.975)) };
        out.mean.push(Some(mean));
        out.ci_lo.push(Some(lo));
        out.ci_hi.push(Some(hi));
    }
    Ok(out)
}

/// Long-format CSV over several traces of one event (typically one per layer).
pub fn write_aligned_csv<W: Write>(traces: &[AlignedTrace], w: W) -> Result<(), PipelineError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["event", "layer", "offset", "tick", "mean", "ci_lo", "ci_hi", "n"]).map_err(PipelineError::csv)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in traces {
        for i in 0..t.offsets.len() {
            wtr.write_record([
                t.event.slug().to_string(),
                t.layer.to_string(),
                t.offsets[i].to_string(),
                t.ticks[i].clone(),
                fmt(t.mean[i]),
                fmt(t.ci_lo[i]),
                fmt(t.ci_hi[i]),
                t.n[i].to_string(),
            ])
            .map_err(PipelineError::csv)?;
        }
    }
    wtr.flush().map_err(|e| PipelineError::csv(e.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layers: Vec<usize>,
    pub offsets: Vec<i64>,
    /// `layers × offsets`; `NaN` where no node contributes.
    pub values: Array2<f64>,
    pub n_nodes: Array2<usize>,
}

/// Change relative to each node's own pre-solve baseline, averaged across
/// nodes, per layer and offset from the solve Header.
pub fn delta_heatmap(
    grid: &TraceGrid,
    layout: TreeLayout,
    offsets: std::ops::RangeInclusive<i64>,
    baseline: std::ops::RangeInclusive<i64>,
) -> Result<Heatmap, PipelineError> {
    if baseline.is_empty() || offsets.is_empty() {
        return Err(PipelineError::InvalidArgument("empty offset or baseline window".into()));
    }
    let canon = CanonicalLayout::new(layout);
    let offsets: Vec<i64> = offsets.collect();
    let mut values = Array2::from_elem((grid.layers.len(), offsets.len()), f64::NAN);
    let mut n_nodes = Array2::zeros((grid.layers.len(), offsets.len()));
    let mut any_baseline = false;
    for (li, &layer) in grid.layers.iter().enumerate() {
        let mut sums = vec![0.0; offsets.len()];
        for &node in &grid.nodes {
            let Some(header) = canon.solve(node, AnchorKind::Header) else { continue };
            let at = |off: i64| -> Option<f64> {
                let ord = header as i64 + off;
                (ord >= 0).then(|| grid.value(node, ord as usize, layer)).flatten()
            };
            let base: Option<Vec<f64>> = baseline.clone().map(at).collect();
            let Some(base) = base else { continue };
            any_baseline = true;
            let b = base.iter().sum::<f64>() / base.len() as f64;
            for (k, &off) in offsets.iter().enumerate() {
                if let Some(v) = at(off) {
                    sums[k] += v - b;
                    n_nodes[[li, k]] += 1;
                }
            }
        }
        for k in 0..offsets.len() {
            if n_nodes[[li, k]] > 0 {
                values[[li, k]] = sums[k] / n_nodes[[li, k]] as f64;
            }
        }
    }
    if !any_baseline {
        return Err(PipelineError::BaselineOutsideGrid { start: *baseline.start(), end: *baseline.end() });
    }
    Ok(Heatmap { layers: grid.layers.clone(), offsets, values, n_nodes })
}

impl Heatmap {
    pub fn get(&self, layer: usize, offset: i64) -> Option<f64> {
        let l = self.layers.iter().position(|&x| x == layer)?;
        let o = self.offsets.iter().position(|&x| x == offset)?;
        let v = self.values[[l, o]];
        (!v.is_nan()).then_some(v)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PipelineError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["layer", "offset", "delta", "n_nodes"]).map_err(PipelineError::csv)?;
        for (li, &layer) in self.layers.iter().enumerate() {
            for (k, &off) in self.offsets.iter().enumerate() {
                let v = self.values[[li, k]];
                wtr.write_record([
                    layer.to_string(),
                    off.to_string(),
                    if v.is_nan() { String::new() } else { v.to_string() },
                    self.n_nodes[[li, k]].to_string(),
                ])
                .map_err(PipelineError::csv)?;
            }
        }
        wtr.flush().map_err(|e| PipelineError::csv(e.into()))
    }
}
