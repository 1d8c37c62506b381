//! Trace grids, event alignment, heatmaps and the end-to-end report.

mod align;
mod grid;
mod report;

use std::path::PathBuf;

use thiserror::Error;

pub use align::{align_traces, delta_heatmap, write_aligned_csv, AlignEvent, AlignedTrace, BootstrapConfig, Heatmap};
pub use grid::{compute_trace_grid, read_grid_csv, Cell, CellFlag, GridConfig, GridRow, Metric, TraceGrid};
pub use report::{
    attention_pairs, run_report, AlignSettings, AttentionSettings, AttentionSummary, DatasetSource, DumpSource, HeatmapSettings,
    ProbeSettings, ReportConfig, RunManifest, Source, Stage,
};

use crate::attention::AttentionError;
use crate::geometry::GeometryError;
use crate::logic::LogicError;
use crate::store::StoreError;
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty {0} selection")]
    EmptySelection(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("baseline offsets {start}..={end} fall outside the grid for every node")]
    BaselineOutsideGrid { start: i64, end: i64 },
    #[error("csv: {0}")]
    Csv(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: Stage, source: Box<PipelineError> },
}

impl PipelineError {
    pub(crate) fn csv(e: csv::Error) -> Self {
        PipelineError::Csv(e.to_string())
    }

    /// The failing stage, when raised by [`run_report`].
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}
