//! On-disk activation dumps and manifold assembly.
//!
//! A dump directory holds `manifest.json` plus, per task:
//!
//! * `acts_<id>.bin`: raw little-endian `f32`, shape `[n_tokens][n_layers][d_model]`
//! * `tokens_<id>.jsonl`: one [`TokenSpan`] per line
//! * `anchors_<id>.jsonl`: one aligned [`AnchorEvent`] per line, tagged with the task id
//! * `attn_<id>.bin` + `attn_<id>.json` (optional): dense attention rows of
//!   length `n_tokens` for the `(layer, head, token)` keys listed in the index

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{NodeTruthMap, TaskInstance};
use crate::sample::{ManifoldSample, SampleError, SampleMeta};
use crate::scalar::Scalar;
use crate::transcript::{AnchorEvent, AnchorKind, Phase, TokenSpan};

/// Format tag stored in the manifest; readers refuse anything else.
pub const DUMP_FORMAT: &str = "cotgeo-dump/1";
pub const DTYPE: &str = "f32le";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("bad magic: expected format {DUMP_FORMAT:?}, found {0:?}")]
    BadMagic(String),
    #[error("unsupported dtype {0:?} (only {DTYPE:?})")]
    BadDtype(String),
    #[error("{path}: truncated, expected {expected} bytes, found {got}")]
    Truncated { path: PathBuf, expected: u64, got: u64 },
    #[error("{path}: size mismatch, expected {expected} bytes, found {got}")]
    SizeMismatch { path: PathBuf, expected: u64, got: u64 },
    #[error("invalid dump: {0}")]
    Invalid(String),
    #[error("task {task_id}: no unique anchor for {selector}")]
    MissingAnchor { task_id: String, selector: String },
    #[error("task {task_id}: no truth value for node {node_id}")]
    MissingTruth { task_id: String, node_id: u32 },
    #[error("missing attention row (layer {layer}, head {head}, token {token}) in task {task_id}")]
    MissingAttentionRow { task_id: String, layer: usize, head: usize, token: usize },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> StoreError + '_ {
    move |source| StoreError::Json { path: path.to_path_buf(), source }
}

/// Which tokens have attention rows stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowPolicy {
    /// Only the final token of each structural anchor.
    AnchorTokens,
    /// Every token on each solve-phase Logic line.
    LogicLines,
    AllTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub layers: Vec<usize>,
    pub n_heads: usize,
    pub row_policy: RowPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task_id: String,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format: String,
    pub model_name: String,
    /// Free text from the capture side, e.g. "block-output".
    pub capture_point: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub dtype: String,
    pub tasks: Vec<TaskEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionSpec>,
}

impl DumpManifest {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.format != DUMP_FORMAT {
            return Err(StoreError::BadMagic(self.format.clone()));
        }
        if self.dtype != DTYPE {
            return Err(StoreError::BadDtype(self.dtype.clone()));
        }
        if self.n_layers == 0 || self.d_model == 0 {
            return Err(StoreError::Invalid("n_layers and d_model must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            if t.task_id.is_empty() || t.task_id.contains(['/', '\\']) {
                return Err(StoreError::Invalid(format!("unusable task id {:?}", t.task_id)));
            }
            if !seen.insert(&t.task_id) {
                return Err(StoreError::Invalid(format!("duplicate task id {}", t.task_id)));
            }
            if t.n_tokens == 0 {
                return Err(StoreError::Invalid(format!("task {} has no tokens", t.task_id)));
            }
        }
        if let Some(a) = &self.attention {
            if a.n_heads == 0 {
                return Err(StoreError::Invalid("attention n_heads must be positive".into()));
            }
            if let Some(&l) = a.layers.iter().find(|&&l| l >= self.n_layers) {
                return Err(StoreError::Invalid(format!("attention layer {l} >= n_layers {}", self.n_layers)));
            }
        }
        Ok(())
    }

    fn row_len(&self) -> usize {
        self.n_layers * self.d_model
    }

    fn acts_bytes(&self, n_tokens: usize) -> u64 {
        (n_tokens * self.row_len() * 4) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub layer: usize,
    pub head: usize,
    pub token: usize,
}

#[derive(Serialize, Deserialize)]
struct AttentionIndex {
    n_tokens: usize,
    rows: Vec<RowKey>,
}

/// Row-sparse attention for one task: the probabilities query token `token`
/// assigns to every key position, per stored `(layer, head, token)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRows {
    n_tokens: usize,
    keys: Vec<RowKey>,
    data: Vec<f32>,
    index: BTreeMap<RowKey, usize>,
}

impl AttentionRows {
    pub fn new(n_tokens: usize, keys: Vec<RowKey>, data: Vec<f32>) -> Result<Self, StoreError> {
        if data.len() != keys.len() * n_tokens {
            return Err(StoreError::Invalid(format!(
                "attention data has {} values for {} rows of length {n_tokens}",
                data.len(),
                keys.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            if k.token >= n_tokens {
                return Err(StoreError::OutOfRange(format!("attention row token {} >= {n_tokens}", k.token)));
            }
            if index.insert(*k, i).is_some() {
                return Err(StoreError::Invalid(format!("duplicate attention row {k:?}")));
            }
        }
        Ok(Self { n_tokens, keys, data, index })
    }

    /// Builds rows from a closure over keys.
    pub fn from_fn(n_tokens: usize, keys: Vec<RowKey>, mut f: impl FnMut(RowKey) -> Vec<f32>) -> Result<Self, StoreError> {
        let mut data = Vec::with_capacity(keys.len() * n_tokens);
        for &k in &keys {
            let row = f(k);
            if row.len() != n_tokens {
                return Err(StoreError::Invalid(format!("attention row {k:?} has length {}", row.len())));
            }
            data.extend(row);
        }
        Self::new(n_tokens, keys, data)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn keys(&self) -> &[RowKey] {
        &self.keys
    }

    pub fn row(&self, layer: usize, head: usize, token: usize) -> Option<&[f32]> {
        let i = *self.index.get(&RowKey { layer, head, token })?;
        Some(&self.data[i * self.n_tokens..(i + 1) * self.n_tokens])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskActivations {
    pub task_id: String,
    pub n_tokens: usize,
    /// `[n_tokens][n_layers][d_model]`, row-major.
    pub acts: Vec<f32>,
    pub tokens: Vec<TokenSpan>,
    pub anchors: Vec<AnchorEvent>,
    pub attention: Option<AttentionRows>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub manifest: DumpManifest,
    pub tasks: Vec<TaskActivations>,
}

impl ActivationDump {
    /// Assembles a dump, deriving the manifest from the tasks.
    pub fn new(
        model_name: impl Into<String>,
        capture_point: impl Into<String>,
        n_layers: usize,
        d_model: usize,
        attention: Option<AttentionSpec>,
        tasks: Vec<TaskActivations>,
    ) -> Result<Self, StoreError> {
        let manifest = DumpManifest {
            format: DUMP_FORMAT.into(),
            model_name: model_name.into(),
            capture_point: capture_point.into(),
            n_layers,
            d_model,
            dtype: DTYPE.into(),
            tasks: tasks.iter().map(|t| TaskEntry { task_id: t.task_id.clone(), n_tokens: t.n_tokens }).collect(),
            attention,
        };
        let dump = Self { manifest, tasks };
        dump.validate()?;
        Ok(dump)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let m = &self.manifest;
        m.validate()?;
        if m.tasks.len() != self.tasks.len() {
            return Err(StoreError::Invalid("manifest task list does not match tensors".into()));
        }
        for (entry, t) in m.tasks.iter().zip(&self.tasks) {
            if entry.task_id != t.task_id || entry.n_tokens != t.n_tokens {
                return Err(StoreError::Invalid(format!("manifest entry {} does not match tensors", entry.task_id)));
            }
            if t.acts.len() != t.n_tokens * m.row_len() {
                return Err(StoreError::Invalid(format!(
                    "task {}: {} values, expected {}",
                    t.task_id,
                    t.acts.len(),
                    t.n_tokens * m.row_len()
                )));
            }
            validate_task_meta(&t.task_id, t.n_tokens, &t.tokens, &t.anchors)?;
            match (&t.attention, &m.attention) {
                (Some(a), Some(spec)) => {
                    if a.n_tokens != t.n_tokens {
                        return Err(StoreError::Invalid(format!("task {}: attention row length", t.task_id)));
                    }
                    if let Some(k) = a.keys.iter().find(|k| !spec.layers.contains(&k.layer) || k.head >= spec.n_heads) {
                        return Err(StoreError::Invalid(format!("task {}: attention row {k:?} outside spec", t.task_id)));
                    }
                }
                (Some(_), None) => {
                    return Err(StoreError::Invalid(format!("task {}: attention rows without a spec", t.task_id)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }

    pub fn residual(&self, task: usize, layer: usize, token: usize) -> &[f32] {
        let m = &self.manifest;
        let off = (token * m.n_layers + layer) * m.d_model;
        &self.tasks[task].acts[off..off + m.d_model]
    }
}

fn validate_task_meta(task_id: &str, n_tokens: usize, tokens: &[TokenSpan], anchors: &[AnchorEvent]) -> Result<(), StoreError> {
    if tokens.len() != n_tokens {
        return Err(StoreError::Invalid(format!("task {task_id}: {} token spans for {n_tokens} tokens", tokens.len())));
    }
    if let Some((i, _)) = tokens.iter().enumerate().find(|(i, t)| t.index != *i) {
        return Err(StoreError::Invalid(format!("task {task_id}: token span {i} has wrong index")));
    }
    for a in anchors {
        match a.token_index {
            Some(ti) if ti < n_tokens => {}
            Some(ti) => {
                return Err(StoreError::Invalid(format!(
                    "task {task_id}: anchor {} token {ti} >= {n_tokens}",
                    a.describe()
                )))
            }
            None => return Err(StoreError::Invalid(format!("task {task_id}: anchor {} is unaligned", a.describe()))),
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct AnchorRecord {
    task_id: String,
    #[serde(flatten)]
    event: AnchorEvent,
}

fn acts_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("acts_{id}.bin"))
}
fn tokens_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("tokens_{id}.jsonl"))
}
fn anchors_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("anchors_{id}.jsonl"))
}
fn attn_bin_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("attn_{id}.bin"))
}
fn attn_index_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("attn_{id}.json"))
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_jsonl<S: Serialize>(path: &Path, items: impl IntoIterator<Item = S>) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(json_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>, StoreError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(json_err(path))?);
    }
    Ok(out)
}

fn check_size(path: &Path, expected: u64) -> Result<(), StoreError> {
    let got = fs::metadata(path).map_err(io_err(path))?.len();
    match got.cmp(&expected) {
        std::cmp::Ordering::Less => Err(StoreError::Truncated { path: path.to_path_buf(), expected, got }),
        std::cmp::Ordering::Greater => Err(StoreError::SizeMismatch { path: path.to_path_buf(), expected, got }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

fn read_f32s(path: &Path, expected_len: usize) -> Result<Vec<f32>, StoreError> {
    check_size(path, (expected_len * 4) as u64)?;
    let mut bytes = Vec::with_capacity(expected_len * 4);
    File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_dump(dump: &ActivationDump, dir: impl AsRef<Path>) -> Result<(), StoreError> {
    dump.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for t in &dump.tasks {
        write_f32s(&acts_path(dir, &t.task_id), &t.acts)?;
        write_jsonl(&tokens_path(dir, &t.task_id), &t.tokens)?;
        write_jsonl(
            &anchors_path(dir, &t.task_id),
            t.anchors.iter().map(|e| AnchorRecord { task_id: t.task_id.clone(), event: e.clone() }),
        )?;
        if let Some(a) = &t.attention {
            write_f32s(&attn_bin_path(dir, &t.task_id), &a.data)?;
            let idx_path = attn_index_path(dir, &t.task_id);
            let idx = AttentionIndex { n_tokens: a.n_tokens, rows: a.keys.clone() };
            fs::write(&idx_path, serde_json::to_vec(&idx).map_err(json_err(&idx_path))?).map_err(io_err(&idx_path))?;
        }
    }
    // Manifest last, so a partially written directory never looks complete.
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&dump.manifest).map_err(json_err(&mpath))?;
    fs::write(&mpath, text + "\n").map_err(io_err(&mpath))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DumpManifest, StoreError> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let m: DumpManifest = serde_json::from_str(&text).map_err(json_err(&path))?;
    m.validate()?;
    Ok(m)
}

fn read_anchors(dir: &Path, id: &str) -> Result<Vec<AnchorEvent>, StoreError> {
    let path = anchors_path(dir, id);
    let records: Vec<AnchorRecord> = read_jsonl(&path)?;
    records
        .into_iter()
        .map(|r| {
            if r.task_id == id {
                Ok(r.event)
            } else {
                Err(StoreError::Invalid(format!("{}: record for task {}", path.display(), r.task_id)))
            }
        })
        .collect()
}

fn read_attention(dir: &Path, id: &str, n_tokens: usize) -> Result<Option<AttentionRows>, StoreError> {
    let idx_path = attn_index_path(dir, id);
    if !idx_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&idx_path).map_err(io_err(&idx_path))?;
    let idx: AttentionIndex = serde_json::from_str(&text).map_err(json_err(&idx_path))?;
    if idx.n_tokens != n_tokens {
        return Err(StoreError::Invalid(format!("{}: n_tokens {} != {n_tokens}", idx_path.display(), idx.n_tokens)));
    }
    let data = read_f32s(&attn_bin_path(dir, id), idx.rows.len() * n_tokens)?;
    AttentionRows::new(n_tokens, idx.rows, data).map(Some)
}

/// Loads a whole dump into memory, validating every file.
pub fn read_dump(dir: impl AsRef<Path>) -> Result<ActivationDump, StoreError> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let id = &entry.task_id;
        let acts = read_f32s(&acts_path(dir, id), entry.n_tokens * manifest.row_len())?;
        tasks.push(TaskActivations {
            task_id: id.clone(),
            n_tokens: entry.n_tokens,
            acts,
            tokens: read_jsonl(&tokens_path(dir, id))?,
            anchors: read_anchors(dir, id)?,
            attention: read_attention(dir, id, entry.n_tokens)?,
        });
    }
    let dump = ActivationDump { manifest, tasks };
    dump.validate()?;
    Ok(dump)
}

/// Lazy reader: metadata in memory, residual rows fetched from disk on demand.
#[derive(Debug)]
pub struct DumpReader {
    dir: PathBuf,
    manifest: DumpManifest,
    tokens: Vec<Vec<TokenSpan>>,
    anchors: Vec<Vec<AnchorEvent>>,
}

impl DumpReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let manifest = read_manifest(&dir)?;
        let mut tokens = Vec::new();
        let mut anchors = Vec::new();
        for entry in &manifest.tasks {
            check_size(&acts_path(&dir, &entry.task_id), manifest.acts_bytes(entry.n_tokens))?;
            let t: Vec<TokenSpan> = read_jsonl(&tokens_path(&dir, &entry.task_id))?;
            let a = read_anchors(&dir, &entry.task_id)?;
            validate_task_meta(&entry.task_id, entry.n_tokens, &t, &a)?;
            tokens.push(t);
            anchors.push(a);
        }
        Ok(Self { dir, manifest, tokens, anchors })
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn tokens(&self, task: usize) -> &[TokenSpan] {
        &self.tokens[task]
    }

    /// Reads the `d_model` vector at `(task, layer, token)` without loading the tensor.
    pub fn slice(&self, task: usize, layer: usize, token: usize) -> Result<Vec<f32>, StoreError> {
        let mut out = vec![0.0; self.manifest.d_model];
        self.read_residual(task, layer, token, &mut out)?;
        Ok(out)
    }

    pub fn attention(&self, task: usize) -> Result<Option<AttentionRows>, StoreError> {
        let entry = self
            .manifest
            .tasks
            .get(task)
            .ok_or_else(|| StoreError::OutOfRange(format!("task {task}")))?;
        read_attention(&self.dir, &entry.task_id, entry.n_tokens)
    }
}

/// Anything that can serve residual vectors by `(task, layer, token)`.
pub trait ResidualSource: Sync {
    fn n_layers(&self) -> usize;
    fn d_model(&self) -> usize;
    fn n_tasks(&self) -> usize;
    fn task_id(&self, task: usize) -> &str;
    fn n_tokens(&self, task: usize) -> usize;
    fn anchors(&self, task: usize) -> &[AnchorEvent];
    fn read_residual(&self, task: usize, layer: usize, token: usize, out: &mut [f32]) -> Result<(), StoreError>;
}

fn check_coords(src: &impl ResidualSource, task: usize, layer: usize, token: usize) -> Result<(), StoreError> {
    if task >= src.n_tasks() {
        return Err(StoreError::OutOfRange(format!("task {task} >= {}", src.n_tasks())));
    }
    if layer >= src.n_layers() {
        return Err(StoreError::OutOfRange(format!("layer {layer} >= {}", src.n_layers())));
    }
    if token >= src.n_tokens(task) {
        return Err(StoreError::OutOfRange(format!("token {token} >= {}", src.n_tokens(task))));
    }
    Ok(())
}

impl ResidualSource for ActivationDump {
    fn n_layers(&self) -> usize {
        self.manifest.n_layers
    }
    fn d_model(&self) -> usize {
        self.manifest.d_model
    }
    fn n_tasks(&self) -> usize {
        self.tasks.len()
    }
    fn task_id(&self, task: usize) -> &str {
        &self.tasks[task].task_id
    }
    fn n_tokens(&self, task: usize) -> usize {
        self.tasks[task].n_tokens
    }
    fn anchors(&self, task: usize) -> &[AnchorEvent] {
        &self.tasks[task].anchors
    }
    fn read_residual(&self, task: usize, layer: usize, token: usize, out: &mut [f32]) -> Result<(), StoreError> {
        check_coords(self, task, layer, token)?;
        out.copy_from_slice(self.residual(task, layer, token));
        Ok(())
    }
}

impl ResidualSource for DumpReader {
    fn n_layers(&self) -> usize {
        self.manifest.n_layers
    }
    fn d_model(&self) -> usize {
        self.manifest.d_model
    }
    fn n_tasks(&self) -> usize {
        self.manifest.tasks.len()
    }
    fn task_id(&self, task: usize) -> &str {
        &self.manifest.tasks[task].task_id
    }
    fn n_tokens(&self, task: usize) -> usize {
        self.manifest.tasks[task].n_tokens
    }
    fn anchors(&self, task: usize) -> &[AnchorEvent] {
        &self.anchors[task]
    }
    fn read_residual(&self, task: usize, layer: usize, token: usize, out: &mut [f32]) -> Result<(), StoreError> {
        check_coords(self, task, layer, token)?;
        let m = &self.manifest;
        let path = acts_path(&self.dir, &m.tasks[task].task_id);
        let mut f = File::open(&path).map_err(io_err(&path))?;
        let offset = ((token * m.n_layers + layer) * m.d_model * 4) as u64;
        f.seek(SeekFrom::Start(offset)).map_err(io_err(&path))?;
        let mut buf = vec![0u8; m.d_model * 4];
        f.read_exact(&mut buf).map_err(io_err(&path))?;
        for (o, c) in out.iter_mut().zip(buf.chunks_exact(4)) {
            *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        Ok(())
    }
}

/// Picks one anchor per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSelector {
    /// Position in the task's anchor list (canonical order for well-formed transcripts).
    Ordinal(usize),
    Event { phase: Phase, kind: AnchorKind, node_id: Option<u32> },
}

impl AnchorSelector {
    pub fn solve(node_id: u32, kind: AnchorKind) -> Self {
        AnchorSelector::Event { phase: Phase::Solve, kind, node_id: Some(node_id) }
    }

    /// The unique matching anchor, if any.
    pub fn resolve<'a>(&self, anchors: &'a [AnchorEvent]) -> Option<&'a AnchorEvent> {
        match *self {
            AnchorSelector::Ordinal(i) => anchors.get(i),
            AnchorSelector::Event { phase, kind, node_id } => {
                let mut it = anchors.iter().filter(|a| a.phase == phase && a.kind == kind && a.node_id == node_id);
                let first = it.next()?;
                it.next().is_none().then_some(first)
            }
        }
    }
}

impl std::fmt::Display for AnchorSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let phase_name = |p: &Phase| match p {
            Phase::Solve => "solve",
            Phase::RecallSummary => "recall_summary",
            Phase::Final => "final",
        };
        match self {
            AnchorSelector::Ordinal(i) => write!(f, "#{i}"),
            AnchorSelector::Event { phase, kind, node_id: Some(n) } => write!(f, "{}/{kind}/{n}", phase_name(phase)),
            AnchorSelector::Event { phase, kind, node_id: None } => write!(f, "{}/{kind}", phase_name(phase)),
        }
    }
}

impl std::str::FromStr for AnchorSelector {
    type Err = String;

    /// Accepts `#7` or `7` for ordinals and `phase/kind[/node]` for events,
    /// e.g. `solve/result/3`, `recall_summary/summary/2`, `final/final`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(i) = s.trim_start_matches('#').parse::<usize>() {
            return Ok(AnchorSelector::Ordinal(i));
        }
        let parts: Vec<String> = s.split('/').map(|p| p.to_ascii_lowercase().replace(['_', '-'], "")).collect();
        let bad = || format!("bad anchor selector {s:?} (expected #ordinal or phase/kind[/node])");
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let phase = match parts[0].as_str() {
            "solve" => Phase::Solve,
            "recallsummary" | "recall" | "summary" => Phase::RecallSummary,
            "final" => Phase::Final,
            _ => return Err(bad()),
        };
        let kind = match parts[1].as_str() {
            "header" => AnchorKind::Header,
            "logic" => AnchorKind::Logic,
            "result" => AnchorKind::Result,
            "summary" | "summaryline" => AnchorKind::SummaryLine,
            "final" | "finalanswer" => AnchorKind::FinalAnswer,
            _ => return Err(bad()),
        };
        let node_id = parts.get(2).map(|n| n.parse::<u32>().map_err(|_| bad())).transpose()?;
        Ok(AnchorSelector::Event { phase, kind, node_id })
    }
}

/// Task id → node truth values.
pub type TruthTable = HashMap<String, NodeTruthMap>;

pub fn truth_table(tasks: &[TaskInstance]) -> TruthTable {
    tasks.iter().map(|t| (t.task_id.clone(), t.truth.clone())).collect()
}

/// Token index of the selected anchor in each task, in manifest order.
pub fn anchor_tokens(src: &impl ResidualSource, selector: AnchorSelector) -> Result<Vec<usize>, StoreError> {
    (0..src.n_tasks())
        .map(|task| {
            selector
                .resolve(src.anchors(task))
                .and_then(|a| a.token_index)
                .ok_or_else(|| StoreError::MissingAnchor { task_id: src.task_id(task).to_string(), selector: selector.to_string() })
        })
        .collect()
}

/// `n_tasks × d_model` matrix with row `i` taken at `(tokens[i], layer)`.
pub fn gather_points<T: Scalar>(src: &impl ResidualSource, tokens: &[usize], layer: usize) -> Result<Array2<T>, StoreError> {
    if tokens.len() != src.n_tasks() {
        return Err(StoreError::Invalid(format!("{} tokens for {} tasks", tokens.len(), src.n_tasks())));
    }
    let d = src.d_model();
    let mut out = Array2::zeros((tokens.len(), d));
    let mut buf = vec![0f32; d];
    for (task, &tok) in tokens.iter().enumerate() {
        src.read_residual(task, layer, tok, &mut buf)?;
        for (o, &v) in out.row_mut(task).iter_mut().zip(&buf) {
            *o = T::of(v as f64);
        }
    }
    Ok(out)
}

/// Labels for `node_id` in manifest task order.
pub fn node_labels(src: &impl ResidualSource, node_id: u32, truth: &TruthTable) -> Result<Vec<bool>, StoreError> {
    (0..src.n_tasks())
        .map(|task| {
            let id = src.task_id(task);
            truth
                .get(id)
                .and_then(|t| t.get(node_id))
                .ok_or_else(|| StoreError::MissingTruth { task_id: id.to_string(), node_id })
        })
        .collect()
}

/// One row per task at the selected anchor and layer, labelled by the node's truth value.
pub fn assemble_manifold<T: Scalar>(
    src: &impl ResidualSource,
    node_id: u32,
    selector: AnchorSelector,
    layer: usize,
    truth: &TruthTable,
) -> Result<ManifoldSample<T>, StoreError> {
    let tokens = anchor_tokens(src, selector)?;
    let labels = node_labels(src, node_id, truth)?;
    let points = gather_points(src, &tokens, layer)?;
    let meta = SampleMeta { node_id: Some(node_id), anchor: selector.to_string(), layer: Some(layer) };
    Ok(ManifoldSample::from_bools(points, &labels, meta)?)
}
