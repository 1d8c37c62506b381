//! Config-driven run from tasks to every output table.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::align::{align_traces, delta_heatmap, write_aligned_csv, AlignEvent, BootstrapConfig};
use super::grid::{compute_trace_grid, CellFlag, GridConfig, Metric};
use super::PipelineError;
use crate::attention::{
    attention_capacity_correlation, pair_windows, window_attention_score, with_aggregates, write_attention_csv, AttentionPair,
    AttentionRecord, Relation, RelationFilter, ScoreStat,
};
use crate::geometry::{capacity, CapacityConfig};
use crate::logic::{gen_balanced_dataset, read_tasks_jsonl, TaskInstance, TreeLayout};
use crate::probes::EvalConfig;
use crate::sample::{ManifoldSample, SampleMeta};
use crate::seed::derive;
use crate::store::{
    anchor_tokens, gather_points, node_labels, truth_table, ActivationDump, AttentionRows, DumpReader, ResidualSource, StoreError,
    TruthTable,
};
use crate::synth::{gen_pulse_dump, PulseSchedule};
use crate::transcript::{AnchorEvent, AnchorKind, CanonicalLayout, TokenSpan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dataset,
    Capture,
    Grid,
    Align,
    Heatmap,
    Attention,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Dataset => "dataset",
            Stage::Capture => "capture",
            Stage::Grid => "grid",
            Stage::Align => "align",
            Stage::Heatmap => "heatmap",
            Stage::Attention => "attention",
            Stage::Write => "write",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Balanced tasks; the seed defaults to the run seed.
    Generate { height: u32, count: usize, seed: Option<u64> },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpSource {
    Synthetic(PulseSchedule),
    Path(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub train_frac: f64,
    pub repeats: usize,
    pub stratified: bool,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self { train_frac: e.train_frac, repeats: e.repeats, stratified: e.stratified }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignSettings {
    pub offsets: (i64, i64),
    pub bootstrap: usize,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self { offsets: (-6, 9), bootstrap: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapSettings {
    pub offsets: (i64, i64),
    pub baseline: (i64, i64),
}

impl Default for HeatmapSettings {
    fn default() -> Self {
        Self { offsets: (-5, 8), baseline: (-5, -3) }
    }
}

fn default_task_set() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSettings {
    /// Layers of interest for the max-attention score.
    pub layers: Vec<usize>,
    /// Layer at which source capacity is measured.
    pub capacity_layer: usize,
    #[serde(default = "default_task_set")]
    pub task_set: String,
}

fn default_metric() -> Metric {
    Metric::Capacity
}

fn default_heatmap() -> Option<HeatmapSettings> {
    Some(HeatmapSettings::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub dump: DumpSource,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// `None` selects everything available.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub nodes: Option<Vec<u32>>,
    #[serde(default)]
    pub anchors: Option<Vec<usize>>,
    #[serde(default)]
    pub capacity: CapacityConfig,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default)]
    pub align: AlignSettings,
    #[serde(default = "default_heatmap")]
    pub heatmap: Option<HeatmapSettings>,
    #[serde(default)]
    pub attention: Option<AttentionSettings>,
}

impl ReportConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Json(e.to_string()))
    }

    /// Makes relative file paths relative to `base` (usually the config's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DatasetSource::File(p) = &mut self.dataset {
            fix(p);
        }
        if let DumpSource::Path(p) = &mut self.dump {
            fix(p);
        }
    }
}

/// Residuals held in memory or read lazily from disk.
pub enum Source {
    Memory(ActivationDump),
    Disk(DumpReader),
}

impl Source {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        DumpReader::open(dir).map(Source::Disk)
    }

    pub fn tokens(&self, task: usize) -> &[TokenSpan] {
        match self {
            Source::Memory(d) => &d.tasks[task].tokens,
            Source::Disk(r) => r.tokens(task),
        }
    }

    pub fn attention(&self, task: usize) -> Result<Option<Cow<'_, AttentionRows>>, StoreError> {
        match self {
            Source::Memory(d) => Ok(d.tasks.get(task).and_then(|t| t.attention.as_ref()).map(Cow::Borrowed)),
            Source::Disk(r) => Ok(r.attention(task)?.map(Cow::Owned)),
        }
    }

    pub fn n_heads(&self) -> Option<usize> {
        let m = match self {
            Source::Memory(d) => &d.manifest,
            Source::Disk(r) => r.manifest(),
        };
        m.attention.as_ref().map(|a| a.n_heads)
    }
}

impl ResidualSource for Source {
    fn n_layers(&self) -> usize {
        match self {
            Source::Memory(d) => d.n_layers(),
            Source::Disk(r) => r.n_layers(),
        }
    }

    fn d_model(&self) -> usize {
        match self {
            Source::Memory(d) => d.d_model(),
            Source::Disk(r) => r.d_model(),
        }
    }

    fn n_tasks(&self) -> usize {
        match self {
            Source::Memory(d) => d.n_tasks(),
            Source::Disk(r) => r.n_tasks(),
        }
    }

    fn task_id(&self, task: usize) -> &str {
        match self {
            Source::Memory(d) => d.task_id(task),
            Source::Disk(r) => r.task_id(task),
        }
    }

    fn n_tokens(&self, task: usize) -> usize {
        match self {
            Source::Memory(d) => d.n_tokens(task),
            Source::Disk(r) => r.n_tokens(task),
        }
    }

    fn anchors(&self, task: usize) -> &[AnchorEvent] {
        match self {
            Source::Memory(d) => d.anchors(task),
            Source::Disk(r) => r.anchors(task),
        }
    }

    fn read_residual(&self, task: usize, layer: usize, token: usize, out: &mut [f32]) -> Result<(), StoreError> {
        match self {
            Source::Memory(d) => d.read_residual(task, layer, token, out),
            Source::Disk(r) => r.read_residual(task, layer, token, out),
        }
    }
}

/// `A(T→S)` averaged over tasks and source capacity at the end of `T`'s
/// solve phase, for every ordered pair `S < T`, plus the per-task records.
pub fn attention_pairs(
    src: &Source,
    truth: &TruthTable,
    layout: TreeLayout,
    settings: &AttentionSettings,
    capacity_cfg: &CapacityConfig,
    seed: u64,
) -> Result<(Vec<AttentionPair>, Vec<AttentionRecord>), PipelineError> {
    let n_heads = src
        .n_heads()
        .ok_or_else(|| PipelineError::InvalidArgument("dump has no attention rows".into()))?;
    let canon = CanonicalLayout::new(layout);
    let m = layout.node_count();
    let layer_roi = settings.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";");
    let pairs: Vec<(u32, u32)> = (1..=m).flat_map(|t| (1..t).map(move |s| (s, t))).collect();

    let mut records = Vec::new();
    let mut sums = vec![0.0; pairs.len()];
    for task in 0..src.n_tasks() {
        let rows = src
            .attention(task)?
            .ok_or_else(|| PipelineError::InvalidArgument(format!("task {} has no attention rows", src.task_id(task))))?;
        for (k, &(s, t)) in pairs.iter().enumerate() {
            let w = pair_windows(src.tokens(task), src.anchors(task), s, t, &settings.layers, n_heads)?;
            let score = window_attention_score(&rows, &w)?.value;
            sums[k] += score;
            records.push(AttentionRecord {
                task_set: settings.task_set.clone(),
                task_id: src.task_id(task).to_string(),
                stat: ScoreStat::Task,
                source: s,
                target: t,
                relation: Relation::of(&layout, s, t),
                score,
                layer_roi: layer_roi.clone(),
            });
        }
    }

    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(s, t)) in pairs.iter().enumerate() {
        let anchor = canon.solve(t, AnchorKind::Result).expect("node in layout");
        let tokens = anchor_tokens(src, crate::store::AnchorSelector::Ordinal(anchor))?;
        let pts = gather_points::<f64>(src, &tokens, settings.capacity_layer)?;
        let meta = SampleMeta { node_id: Some(s), anchor: format!("#{anchor}"), layer: Some(settings.capacity_layer) };
        let sample = ManifoldSample::from_bools(pts, &node_labels(src, s, truth)?, meta).map_err(StoreError::from)?;
        let cc = CapacityConfig { seed: derive(seed, &[s as u64, t as u64]), ..*capacity_cfg };
        let alpha = capacity(&sample, &cc)?.alpha;
        out.push(AttentionPair {
            source: s,
            target: t,
            relation: Relation::of(&layout, s, t),
            score: sums[k] / src.n_tasks() as f64,
            alpha,
        });
    }
    Ok((out, with_aggregates(records)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionSummary {
    pub n_pairs: usize,
    pub r_direct_child: Option<f64>,
    pub r_all: Option<f64>,
    /// Why a correlation is missing, if it is.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ReportConfig,
    pub n_tasks: usize,
    pub height: u32,
    pub model_name: String,
    pub capture_point: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub metric: Metric,
    pub n_cells: usize,
    pub n_failed: usize,
    pub n_not_separable: usize,
    /// Nodes left out of each aligned trace.
    pub excluded: BTreeMap<String, Vec<u32>>,
    pub attention: Option<AttentionSummary>,
    pub outputs: Vec<String>,
}

fn tag(stage: Stage) -> impl FnOnce(PipelineError) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: Box::new(e) }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

fn load_tasks(cfg: &ReportConfig) -> Result<Vec<TaskInstance>, PipelineError> {
    let tasks = match &cfg.dataset {
        DatasetSource::Generate { height, count, seed } => gen_balanced_dataset(*height, *count, seed.unwrap_or(cfg.seed))?,
        DatasetSource::File(path) => {
            let f = File::open(path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
            read_tasks_jsonl(BufReader::new(f))?
        }
    };
    let Some(first) = tasks.first() else {
        return Err(PipelineError::InvalidArgument("empty dataset".into()));
    };
    if tasks.iter().any(|t| t.height() != first.height()) {
        return Err(PipelineError::InvalidArgument("tasks of mixed heights".into()));
    }
    Ok(tasks)
}

/// Runs every configured stage and writes `grid.csv`, `aligned_<event>.csv`,
/// `heatmap.csv`, `attention.csv` and `run_manifest.json` into `out_dir`.
/// Errors name the failing stage. Outputs depend only on the config.
pub fn run_report(cfg: &ReportConfig, out_dir: impl AsRef<Path>) -> Result<RunManifest, PipelineError> {
    let out_dir = out_dir.as_ref();

    let tasks = load_tasks(cfg).map_err(tag(Stage::Dataset))?;
    let layout = tasks[0].tree.layout();
    let truth = truth_table(&tasks);

    let src = match &cfg.dump {
        DumpSource::Synthetic(schedule) => gen_pulse_dump(schedule, &tasks, derive(cfg.seed, &[1])).map(Source::Memory).map_err(PipelineError::from),
        DumpSource::Path(dir) => Source::open(dir).map_err(PipelineError::from),
    }
    .map_err(tag(Stage::Capture))?;
    let (model_name, capture_point) = match &src {
        Source::Memory(d) => (d.manifest.model_name.clone(), d.manifest.capture_point.clone()),
        Source::Disk(r) => (r.manifest().model_name.clone(), r.manifest().capture_point.clone()),
    };

    let canon = CanonicalLayout::new(layout);
    let layers = cfg.layers.clone().unwrap_or_else(|| (0..src.n_layers()).collect());
    let nodes = cfg.nodes.clone().unwrap_or_else(|| (1..=layout.node_count()).collect());
    let anchors = cfg.anchors.clone().unwrap_or_else(|| (0..canon.len()).collect());
    let gcfg = GridConfig {
        seed: derive(cfg.seed, &[2]),
        capacity: cfg.capacity,
        eval: EvalConfig {
            train_frac: cfg.probe.train_frac,
            repeats: cfg.probe.repeats,
            stratified: cfg.probe.stratified,
            ..EvalConfig::default()
        },
    };
    let grid = compute_trace_grid(&src, &truth, cfg.metric, &layers, &nodes, &anchors, &gcfg).map_err(tag(Stage::Grid))?;

    let mut aligned = Vec::new();
    let mut excluded = BTreeMap::new();
    for event in AlignEvent::ALL {
        let mut traces = Vec::new();
        for &layer in &grid.layers {
            let boot = BootstrapConfig { resamples: cfg.align.bootstrap, seed: derive(cfg.seed, &[3, event as u64, layer as u64]) };
            let (a, b) = cfg.align.offsets;
            match align_traces(&grid, event, layout, layer, a..=b, &boot) {
                Ok(t) => traces.push(t),
                // A single-node tree has no parent recall; skip rather than fail.
                Err(PipelineError::InvalidArgument(msg)) if event == AlignEvent::ParentRecall => {
                    log::warn!("{msg}");
                    break;
                }
                Err(e) => return Err(tag(Stage::Align)(e)),
            }
        }
        if let Some(t) = traces.first() {
            excluded.insert(event.slug().to_string(), t.excluded.clone());
        }
        aligned.push((event, traces));
    }

    let heatmap = cfg
        .heatmap
        .map(|h| delta_heatmap(&grid, layout, h.offsets.0..=h.offsets.1, h.baseline.0..=h.baseline.1))
        .transpose()
        .map_err(tag(Stage::Heatmap))?;

    let attention = cfg
        .attention
        .as_ref()
        .map(|s| attention_pairs(&src, &truth, layout, s, &cfg.capacity, derive(cfg.seed, &[4])))
        .transpose()
        .map_err(tag(Stage::Attention))?;

    let write = || -> Result<(Vec<String>, Option<AttentionSummary>), PipelineError> {
        std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io { path: out_dir.to_path_buf(), source })?;
        let mut outputs = Vec::new();
        grid.write_csv(create(&out_dir.join("grid.csv"))?)?;
        outputs.push("grid.csv".to_string());
        for (event, traces) in &aligned {
            if traces.is_empty() {
                continue;
            }
            let name = format!("aligned_{}.csv", event.slug());
            write_aligned_csv(traces, create(&out_dir.join(&name))?)?;
            outputs.push(name);
        }
        if let Some(h) = &heatmap {
            h.write_csv(create(&out_dir.join("heatmap.csv"))?)?;
            outputs.push("heatmap.csv".to_string());
        }
        let mut summary = None;
        if let Some((pairs, records)) = &attention {
            write_attention_csv(records, create(&out_dir.join("attention.csv"))?)?;
            outputs.push("attention.csv".to_string());
            let mut notes = Vec::new();
            let mut corr = |filter: RelationFilter| match attention_capacity_correlation(pairs, filter) {
                Ok(r) => Some(r),
                Err(e) => {
                    notes.push(format!("{filter:?}: {e}"));
                    None
                }
            };
            let r_direct_child = corr(RelationFilter::DirectChild);
            let r_all = corr(RelationFilter::All);
            summary = Some(AttentionSummary { n_pairs: pairs.len(), r_direct_child, r_all, notes });
        }
        outputs.push("run_manifest.json".to_string());
        Ok((outputs, summary))
    };
    let (outputs, attention_summary) = write().map_err(tag(Stage::Write))?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        n_tasks: tasks.len(),
        height: layout.height(),
        model_name,
        capture_point,
        n_layers: src.n_layers(),
        d_model: src.d_model(),
        metric: cfg.metric,
        n_cells: grid.cells.len(),
        n_failed: grid.cells.iter().filter(|c| c.flag == CellFlag::Failed).count(),
        n_not_separable: grid.cells.iter().filter(|c| c.flag == CellFlag::NotSeparable).count(),
        excluded,
        attention: attention_summary,
        outputs,
    };
    let path = out_dir.join("run_manifest.json");
    let write_manifest = || -> Result<(), PipelineError> {
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| PipelineError::Json(e.to_string()))?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|source| PipelineError::Io { path: path.clone(), source })
    };
    write_manifest().map_err(tag(Stage::Write))?;
    Ok(manifest)
}
