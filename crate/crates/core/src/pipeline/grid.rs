//! Metric values over `(node, anchor ordinal, layer)` cells.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::geometry::{capacity, participation_ratio, twonn_id, CapacityConfig};
use crate::probes::{eval_probe, EvalConfig, ProbeKind};
use crate::sample::{ManifoldSample, SampleMeta};
use crate::seed::derive;
use crate::store::{anchor_tokens, gather_points, node_labels, AnchorSelector, ResidualSource, TruthTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Capacity,
    NStar,
    Twonn,
    Pr,
    SvmAcc,
    LogitAcc,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Metric::Capacity, Metric::NStar, Metric::Twonn, Metric::Pr, Metric::SvmAcc, Metric::LogitAcc];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Capacity => "capacity",
            Metric::NStar => "n_star",
            Metric::Twonn => "twonn",
            Metric::Pr => "pr",
            Metric::SvmAcc => "svm_acc",
            Metric::LogitAcc => "logit_acc",
        }
    }

    fn code(self) -> u64 {
        Self::ALL.iter().position(|&m| m == self).expect("listed") as u64
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?} (expected one of capacity, n_star, twonn, pr, svm_acc, logit_acc)"))
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFlag {
    Ok,
    /// Hard-margin fit failed on at least one split; logistic accuracy used there.
    NotSeparable,
    Failed,
}

impl CellFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            CellFlag::Ok => "ok",
            CellFlag::NotSeparable => "not_separable",
            CellFlag::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub node_id: u32,
    pub anchor: usize,
    pub layer: usize,
    pub value: Option<f64>,
    /// Standard error (Monte Carlo estimators) or CI half-width (probes).
    pub se: Option<f64>,
    pub n_points: usize,
    pub flag: CellFlag,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridConfig {
    pub seed: u64,
    pub capacity: CapacityConfig,
    pub eval: EvalConfig,
}

/// Dense over `nodes × anchors × layers`, in that nesting order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGrid {
    pub metric: Metric,
    pub nodes: Vec<u32>,
    pub anchors: Vec<usize>,
    pub layers: Vec<usize>,
    pub cells: Vec<Cell>,
}

impl TraceGrid {
    pub fn index(&self, node_id: u32, anchor: usize, layer: usize) -> Option<usize> {
        let n = self.nodes.iter().position(|&x| x == node_id)?;
        let a = self.anchors.iter().position(|&x| x == anchor)?;
        let l = self.layers.iter().position(|&x| x == layer)?;
        Some((n * self.anchors.len() + a) * self.layers.len() + l)
    }

    pub fn cell(&self, node_id: u32, anchor: usize, layer: usize) -> Option<&Cell> {
        self.index(node_id, anchor, layer).map(|i| &self.cells[i])
    }

    pub fn value(&self, node_id: u32, anchor: usize, layer: usize) -> Option<f64> {
        self.cell(node_id, anchor, layer).and_then(|c| c.value)
    }

    /// Values along the anchor axis for one node and layer.
    pub fn trace(&self, node_id: u32, layer: usize) -> Vec<Option<f64>> {
        self.anchors.iter().map(|&a| self.value(node_id, a, layer)).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), PipelineError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["node", "anchor", "layer", "value", "se", "flag"]).map_err(PipelineError::csv)?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            wtr.write_record([
                c.node_id.to_string(),
                c.anchor.to_string(),
                c.layer.to_string(),
                fmt(c.value),
                fmt(c.se),
                c.flag.as_str().to_string(),
            ])
            .map_err(PipelineError::csv)?;
        }
        wtr.flush().map_err(|e| PipelineError::csv(e.into()))
    }
}

/// One row of `grid.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GridRow {
    pub node: u32,
    pub anchor: usize,
    pub layer: usize,
    pub value: Option<f64>,
    pub se: Option<f64>,
    pub flag: String,
}

pub fn read_grid_csv<R: Read>(r: R) -> Result<Vec<GridRow>, PipelineError> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<Result<Vec<GridRow>, _>>()
        .map_err(PipelineError::csv)
}

impl TraceGrid {
    /// Rebuilds a grid from `grid.csv` rows. Coordinates are the sorted
    /// distinct values present; absent cells count as failed.
    pub fn from_rows(metric: Metric, rows: &[GridRow]) -> Result<Self, PipelineError> {
        let uniq = |mut v: Vec<usize>| {
            v.sort_unstable();
            v.dedup();
            v
        };
        let nodes: Vec<u32> = uniq(rows.iter().map(|r| r.node as usize).collect()).into_iter().map(|n| n as u32).collect();
        let anchors = uniq(rows.iter().map(|r| r.anchor).collect());
        let layers = uniq(rows.iter().map(|r| r.layer).collect());
        if nodes.is_empty() {
            return Err(PipelineError::EmptySelection("grid rows"));
        }
        let mut cells: Vec<Cell> = nodes
            .iter()
            .flat_map(|&node_id| {
                let layers = &layers;
                anchors.iter().flat_map(move |&anchor| {
                    layers.iter().map(move |&layer| Cell {
                        node_id,
                        anchor,
                        layer,
                        value: None,
                        se: None,
                        n_points: 0,
                        flag: CellFlag::Failed,
                        seed: 0,
                        error: Some("absent from grid file".into()),
                    })
                })
            })
            .collect();
        let mut grid = TraceGrid { metric, nodes, anchors, layers, cells: Vec::new() };
        for r in rows {
            let i = grid.index(r.node, r.anchor, r.layer).expect("coordinate collected above");
            let flag = match r.flag.as_str() {
                "ok" => CellFlag::Ok,
                "not_separable" => CellFlag::NotSeparable,
                "failed" => CellFlag::Failed,
                other => return Err(PipelineError::InvalidArgument(format!("unknown cell flag {other:?}"))),
            };
            let c = &mut cells[i];
            c.value = r.value;
            c.se = r.se;
            c.flag = flag;
            c.error = None;
        }
        grid.cells = cells;
        Ok(grid)
    }
}

fn evaluate(metric: Metric, sample: &ManifoldSample<f64>, seed: u64, cfg: &GridConfig) -> Result<(f64, Option<f64>, CellFlag), String> {
    match metric {
        Metric::Capacity | Metric::NStar => {
            let cc = CapacityConfig { seed, ..cfg.capacity };
            let est = capacity(sample, &cc).map_err(|e| e.to_string())?;
            if metric == Metric::NStar {
                Ok((est.n_star, Some(est.std_error), CellFlag::Ok))
            } else {
                // Delta method: se(2/N) = 2·se(N)/N².
                Ok((est.alpha, Some(2.0 * est.std_error / (est.n_star * est.n_star)), CellFlag::Ok))
            }
        }
        Metric::Twonn => twonn_id(sample.points()).map(|e| (e.value, None, CellFlag::Ok)).map_err(|e| e.to_string()),
        Metric::Pr => participation_ratio(sample.points()).map(|e| (e.value, None, CellFlag::Ok)).map_err(|e| e.to_string()),
        Metric::SvmAcc | Metric::LogitAcc => {
            let kind = if metric == Metric::SvmAcc { ProbeKind::HardSvm } else { ProbeKind::Logistic };
            let ec = EvalConfig { seed, ..cfg.eval };
            let ev = eval_probe(kind, sample, &ec).map_err(|e| e.to_string())?;
            let flag = if ev.n_fallback > 0 { CellFlag::NotSeparable } else { CellFlag::Ok };
            Ok((ev.accuracy, Some(ev.ci), flag))
        }
    }
}

/// Applies `metric` to every cell. Cell failures are recorded in the grid;
/// missing anchors or truth values abort. Each cell seeds from
/// `(seed, metric, node, anchor, layer)`, so evaluation order is irrelevant.
pub fn compute_trace_grid(
    src: &impl ResidualSource,
    truth: &TruthTable,
    metric: Metric,
    layers: &[usize],
    nodes: &[u32],
    anchors: &[usize],
    cfg: &GridConfig,
) -> Result<TraceGrid, PipelineError> {
    if layers.is_empty() {
        return Err(PipelineError::EmptySelection("layers"));
    }
    if nodes.is_empty() {
        return Err(PipelineError::EmptySelection("nodes"));
    }
    if anchors.is_empty() {
        return Err(PipelineError::EmptySelection("anchors"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= src.n_layers()) {
        return Err(PipelineError::InvalidArgument(format!("layer {l} >= n_layers {}", src.n_layers())));
    }
    let tokens: Vec<Vec<usize>> = anchors
        .iter()
        .map(|&a| anchor_tokens(src, AnchorSelector::Ordinal(a)))
        .collect::<Result<_, _>>()?;
    let labels: Vec<Vec<bool>> = nodes.iter().map(|&n| node_labels(src, n, truth)).collect::<Result<_, _>>()?;

    let coords: Vec<(usize, usize, usize)> = (0..nodes.len())
        .flat_map(|n| (0..anchors.len()).flat_map(move |a| (0..layers.len()).map(move |l| (n, a, l))))
        .collect();
    let cells: Vec<Cell> = coords
        .par_iter()
        .map(|&(ni, ai, li)| {
            let (node_id, anchor, layer) = (nodes[ni], anchors[ai], layers[li]);
            let seed = derive(cfg.seed, &[metric.code(), node_id as u64, anchor as u64, layer as u64]);
            let mut cell = Cell { node_id, anchor, layer, value: None, se: None, n_points: 0, flag: CellFlag::Failed, seed, error: None };
            let result = gather_points::<f64>(src, &tokens[ai], layer)
                .map_err(|e| e.to_string())
                .and_then(|pts| {
                    cell.n_points = pts.nrows();
                    let meta = SampleMeta { node_id: Some(node_id), anchor: format!("#{anchor}"), layer: Some(layer) };
                    ManifoldSample::from_bools(pts, &labels[ni], meta).map_err(|e| e.to_string())
                })
                .and_then(|s| evaluate(metric, &s, seed, cfg));
            match result {
                Ok((v, se, flag)) => {
                    cell.value = Some(v);
                    cell.se = se;
                    cell.flag = flag;
                }
                Err(e) => cell.error = Some(e),
            }
            cell
        })
        .collect();
    Ok(TraceGrid { metric, nodes: nodes.to_vec(), anchors: anchors.to_vec(), layers: layers.to_vec(), cells })
}
