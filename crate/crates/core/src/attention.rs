//! Windowed attention between solve phases and its relation to capacity.
//!
//! For a source node `S` and a later target node `T`, the score `A(T→S)` is
//! the largest attention probability any head in the layers of interest
//! assigns from a token of `T`'s Logic line to a token of `S`'s Result line.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::TreeLayout;
use crate::store::AttentionRows;
use crate::transcript::{event_line_span, tokens_in_range, AnchorEvent, AnchorKind, Phase, TokenSpan};

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("missing attention row at layer {layer}, head {head}, token {token}")]
    MissingRow { layer: usize, head: usize, token: usize },
    #[error("empty window: {0}")]
    EmptyWindow(&'static str),
    #[error("source token {token} outside row of length {len}")]
    SourceOutOfRange { token: usize, len: usize },
    #[error("need at least 3 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("no solve-phase {kind} anchor for node {node_id}")]
    MissingAnchor { node_id: u32, kind: AnchorKind },
    #[error("token spans do not tile the text (token {0})")]
    Untiled(usize),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionWindows {
    /// `I_S`: query-side keys, the Result-line tokens of the source node.
    pub source_tokens: Vec<usize>,
    /// `I_T`: queries, the Logic-line tokens of the target node.
    pub target_tokens: Vec<usize>,
    pub layers: Vec<usize>,
    pub n_heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionScore {
    pub value: f64,
    pub layer: usize,
    pub head: usize,
    /// Query (target) token.
    pub target_token: usize,
    /// Key (source) token.
    pub source_token: usize,
}

fn check_windows(w: &AttentionWindows) -> Result<(), AttentionError> {
    if w.source_tokens.is_empty() {
        return Err(AttentionError::EmptyWindow("source tokens"));
    }
    if w.target_tokens.is_empty() {
        return Err(AttentionError::EmptyWindow("target tokens"));
    }
    if w.layers.is_empty() {
        return Err(AttentionError::EmptyWindow("layers"));
    }
    if w.n_heads == 0 {
        return Err(AttentionError::EmptyWindow("heads"));
    }
    Ok(())
}

/// Visits every `(layer, head, i, j, value)` in the window.
fn for_each_entry(
    rows: &AttentionRows,
    w: &AttentionWindows,
    mut f: impl FnMut(usize, usize, usize, usize, f64),
) -> Result<(), AttentionError> {
    check_windows(w)?;
    for &layer in &w.layers {
        for head in 0..w.n_heads {
            for &i in &w.target_tokens {
                let row = rows.row(layer, head, i).ok_or(AttentionError::MissingRow { layer, head, token: i })?;
                for &j in &w.source_tokens {
                    let v = *row.get(j).ok_or(AttentionError::SourceOutOfRange { token: j, len: row.len() })?;
                    f(layer, head, i, j, v as f64);
                }
            }
        }
    }
    Ok(())
}

/// Maximum over layers, heads, target tokens and source tokens. Ties keep the
/// first entry in iteration order.
pub fn window_attention_score(rows: &AttentionRows, w: &AttentionWindows) -> Result<AttentionScore, AttentionError> {
    let mut best: Option<AttentionScore> = None;
    for_each_entry(rows, w, |layer, head, i, j, v| {
        if best.is_none_or(|b| v > b.value) {
            best = Some(AttentionScore { value: v, layer, head, target_token: i, source_token: j });
        }
    })?;
    Ok(best.expect("non-empty windows"))
}

/// Mean over the same window; a diagnostic alternative to the max.
pub fn window_attention_mean(rows: &AttentionRows, w: &AttentionWindows) -> Result<f64, AttentionError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for_each_entry(rows, w, |_, _, _, _, v| {
        sum += v;
        n += 1;
    })?;
    Ok(sum / n as f64)
}

/// Rebuilds the text from spans that tile it.
fn tiled_text(tokens: &[TokenSpan]) -> Result<String, AttentionError> {
    let mut text = String::new();
    let mut chars = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t.char_start != chars {
            return Err(AttentionError::Untiled(i));
        }
        text.push_str(&t.text);
        chars += t.text.chars().count();
        if t.char_end != chars {
            return Err(AttentionError::Untiled(i));
        }
    }
    Ok(text)
}

/// Tokens on the full line of a node's solve-phase anchor of the given kind.
pub fn solve_line_tokens(
    tokens: &[TokenSpan],
    anchors: &[AnchorEvent],
    node_id: u32,
    kind: AnchorKind,
) -> Result<Vec<usize>, AttentionError> {
    let event = anchors
        .iter()
        .find(|a| a.phase == Phase::Solve && a.kind == kind && a.node_id == Some(node_id))
        .ok_or(AttentionError::MissingAnchor { node_id, kind })?;
    let text = tiled_text(tokens)?;
    let (start, end) = event_line_span(&text, event);
    Ok(tokens_in_range(tokens, start, end))
}

/// Windows for `A(T→S)` in one task.
pub fn pair_windows(
    tokens: &[TokenSpan],
    anchors: &[AnchorEvent],
    source: u32,
    target: u32,
    layers: &[usize],
    n_heads: usize,
) -> Result<AttentionWindows, AttentionError> {
    Ok(AttentionWindows {
        source_tokens: solve_line_tokens(tokens, anchors, source, AnchorKind::Result)?,
        target_tokens: solve_line_tokens(tokens, anchors, target, AnchorKind::Logic)?,
        layers: layers.to_vec(),
        n_heads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    /// The source is a child of the target.
    DirectChild,
    Other,
}

impl Relation {
    pub fn of(layout: &TreeLayout, source: u32, target: u32) -> Self {
        if layout.parent_of(source) == Some(target) {
            Relation::DirectChild
        } else {
            Relation::Other
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationFilter {
    DirectChild,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionPair {
    pub source: u32,
    pub target: u32,
    pub relation: Relation,
    pub score: f64,
    /// Source-node capacity at the last anchor of the target's solve phase.
    pub alpha: f64,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AttentionError> {
    assert_eq!(x.len(), y.len(), "pearson: length mismatch");
    let n = x.len();
    if n < 3 {
        return Err(AttentionError::TooFewPairs(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0) {
        return Err(AttentionError::ZeroVariance("x"));
    }
    if !(syy > 0.0) {
        return Err(AttentionError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn attention_capacity_correlation(pairs: &[AttentionPair], filter: RelationFilter) -> Result<f64, AttentionError> {
    let kept: Vec<&AttentionPair> = pairs
        .iter()
        .filter(|p| filter == RelationFilter::All || p.relation == Relation::DirectChild)
        .collect();
    let x: Vec<f64> = kept.iter().map(|p| p.score).collect();
    let y: Vec<f64> = kept.iter().map(|p| p.alpha).collect();
    pearson(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreStat {
    Task,
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub task_set: String,
    /// Empty for aggregate rows.
    pub task_id: String,
    pub stat: ScoreStat,
    pub source: u32,
    pub target: u32,
    pub relation: Relation,
    pub score: f64,
    pub layer_roi: String,
}

/// Per-task rows followed by mean and max aggregates per `(source, target)`.
pub fn with_aggregates(per_task: Vec<AttentionRecord>) -> Vec<AttentionRecord> {
    let mut groups: std::collections::BTreeMap<(u32, u32), Vec<&AttentionRecord>> = Default::default();
    for r in &per_task {
        groups.entry((r.source, r.target)).or_default().push(r);
    }
    let mut out = per_task.clone();
    for ((source, target), rs) in groups {
        let first = rs[0];
        let mean = rs.iter().map(|r| r.score).sum::<f64>() / rs.len() as f64;
        let max = rs.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max);
        for (stat, score) in [(ScoreStat::Mean, mean), (ScoreStat::Max, max)] {
            out.push(AttentionRecord {
                task_set: first.task_set.clone(),
                task_id: String::new(),
                stat,
                source,
                target,
                relation: first.relation,
                score,
                layer_roi: first.layer_roi.clone(),
            });
        }
    }
    out
}

pub fn write_attention_csv<W: Write>(records: &[AttentionRecord], w: W) -> Result<(), AttentionError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(r).map_err(|e| AttentionError::Csv(e.to_string()))?;
    }
    wtr.flush().map_err(|e| AttentionError::Csv(e.to_string()))
}
