use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cotgeo::geometry::{capacity, participation_ratio, twonn_id, CapacityConfig, Centering, DimMethod};
use cotgeo::logic::{gen_balanced_dataset, read_tasks_jsonl, write_tasks_jsonl, TaskInstance, TreeLayout};
use cotgeo::pipeline::{
    align_traces, attention_pairs, compute_trace_grid, delta_heatmap, read_grid_csv, run_report, write_aligned_csv, AlignEvent,
    AttentionSettings, BootstrapConfig, GridConfig, Metric, ReportConfig, Source, TraceGrid,
};
use cotgeo::attention::{attention_capacity_correlation, write_attention_csv, RelationFilter};
use cotgeo::probes::{probe_report, EvalConfig, ProbeKind};
use cotgeo::seed::derive;
use cotgeo::store::{assemble_manifold, truth_table, write_dump, AnchorSelector, ResidualSource};
use cotgeo::synth::{gen_pulse_dump, PulseSchedule, SynthAttention};
use cotgeo::transcript::{
    grade_transcript, parse_transcript, render_reference_cot, render_system_prompt, render_user_message, CanonicalLayout, PromptVariant,
};

#[derive(Parser)]
#[command(name = "cotgeo", version, about = "Representation geometry of chain-of-thought on nested Boolean logic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON config (report config for `report`, pulse schedule for `synth`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Layer set: `a..b`, `a..=b`, or a comma list.
    #[arg(long, global = true)]
    layers: Option<IndexSet>,
    #[arg(long, global = true)]
    metric: Option<Metric>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long = "n-mc", global = true)]
    n_mc: Option<usize>,
    #[arg(long, global = true)]
    centering: Option<Centering>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct DumpArgs {
    /// Activation dump directory.
    #[arg(long)]
    dump: PathBuf,
    /// Tasks JSONL with the ground truth for the dumped tasks.
    #[arg(long)]
    tasks: PathBuf,
}

#[derive(Args)]
struct ManifoldArgs {
    #[command(flatten)]
    dump: DumpArgs,
    /// Node whose truth values label the points.
    #[arg(long)]
    node: u32,
    /// `#ordinal` or `phase/kind[/node]`, e.g. `solve/result/3`.
    #[arg(long)]
    anchor: AnchorSelector,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a balanced task set as JSONL.
    GenTasks {
        #[arg(long)]
        height: u32,
        #[arg(long)]
        count: usize,
    },
    /// Render system prompt, user message and reference transcript per task.
    RenderPrompts {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "normal")]
        variant: PromptVariant,
    },
    /// Extract structural anchors from transcripts (`{task_id, text}` JSONL).
    Parse {
        #[arg(long)]
        transcripts: PathBuf,
    },
    /// Grade transcripts against the tasks' truth values.
    Grade {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
    },
    /// Manifold capacity of one node's manifold at one anchor, per layer.
    Capacity(ManifoldArgs),
    /// Held-out linear probe accuracy, per layer.
    Probes {
        #[command(flatten)]
        manifold: ManifoldArgs,
        #[arg(long, default_value = "hard_svm")]
        kind: ProbeKind,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Include the unit normal of a full-data fit.
        #[arg(long)]
        normal: bool,
    },
    /// Intrinsic dimension (TwoNN) or participation ratio, per layer.
    Dims {
        #[command(flatten)]
        manifold: ManifoldArgs,
        #[arg(long, default_value = "twonn", value_parser = parse_dim_method)]
        method: DimMethod,
    },
    /// Windowed attention scores and their correlation with source capacity.
    Attention {
        #[command(flatten)]
        dump: DumpArgs,
        #[arg(long)]
        capacity_layer: usize,
        #[arg(long, default_value = "default")]
        task_set: String,
    },
    /// Metric grid over nodes × anchors × layers, written as grid.csv.
    Trace {
        #[command(flatten)]
        dump: DumpArgs,
        #[arg(long)]
        nodes: Option<IndexSet>,
        #[arg(long)]
        anchors: Option<IndexSet>,
    },
    /// Event-aligned traces from a grid.csv.
    Align {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        height: u32,
        /// self_solve, parent_recall or summary; all three when omitted.
        #[arg(long)]
        event: Option<AlignEvent>,
        #[arg(long, default_value = "-6..=9", value_parser = parse_offsets, allow_hyphen_values = true)]
        offsets: (i64, i64),
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Baseline-subtracted layer × offset heatmap from a grid.csv.
    Heatmap {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        height: u32,
        #[arg(long, default_value = "-5..=8", value_parser = parse_offsets, allow_hyphen_values = true)]
        offsets: (i64, i64),
        #[arg(long, default_value = "-5..=-3", value_parser = parse_offsets, allow_hyphen_values = true)]
        baseline: (i64, i64),
    },
    /// Write a planted pulse dump for the given tasks.
    Synth {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        n_layers: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 8.0)]
        g_peak: f64,
        #[arg(long, default_value_t = 0.0)]
        g_tail: f64,
        #[arg(long, default_value_t = 0.0)]
        recall_gain: f64,
        #[arg(long, default_value_t = 6.0)]
        width: f64,
        /// Store synthetic attention rows with this many heads (0 = none).
        #[arg(long, default_value_t = 0)]
        heads: usize,
        #[arg(long, default_value_t = 2.0)]
        child_boost: f64,
    },
    /// Run every stage from a report config.
    Report,
}

/// `a..b` (exclusive), `a..=b`, or `a,b,c`.
#[derive(Debug, Clone)]
struct IndexSet(Vec<usize>);

impl std::str::FromStr for IndexSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_index_set(s).map(IndexSet)
    }
}

fn parse_index_set(s: &str) -> Result<Vec<usize>, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    let v: Vec<usize> = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<_, _>>()?
    };
    if v.is_empty() {
        return Err(format!("empty set {s:?}"));
    }
    Ok(v)
}

/// Inclusive `a..=b`; `a..b` is read as exclusive.
fn parse_offsets(s: &str) -> Result<(i64, i64), String> {
    let num = |t: &str| t.trim().parse::<i64>().map_err(|e| format!("{t:?}: {e}"));
    if let Some((a, b)) = s.split_once("..=") {
        Ok((num(a)?, num(b)?))
    } else if let Some((a, b)) = s.split_once("..") {
        Ok((num(a)?, num(b)? - 1))
    } else {
        Err(format!("expected a..=b, got {s:?}"))
    }
}

fn parse_dim_method(s: &str) -> Result<DimMethod, String> {
    match s {
        "twonn" => Ok(DimMethod::TwoNn),
        "pr" => Ok(DimMethod::Pr),
        other => Err(format!("unknown method {other:?} (twonn|pr)")),
    }
}

fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_tasks_jsonl(BufReader::new(f)).with_context(|| format!("reading tasks from {}", path.display()))
}

fn open_source(args: &DumpArgs) -> Result<(Source, Vec<TaskInstance>)> {
    let src = Source::open(&args.dump).with_context(|| format!("opening dump {}", args.dump.display()))?;
    Ok((src, load_tasks(&args.tasks)?))
}

/// `--out` as a file, or stdout.
fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// `--out` as a directory (default `.`), created if needed.
fn out_dir(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let (Some(id), Some(text)) = (v["task_id"].as_str(), v["text"].as_str()) else {
            bail!("{}:{}: expected {{\"task_id\", \"text\"}}", path.display(), i + 1);
        };
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

fn layers_or_all(common: &Common, src: &impl ResidualSource) -> Vec<usize> {
    common.layers.clone().map(|l| l.0).unwrap_or_else(|| (0..src.n_layers()).collect())
}

fn capacity_config(common: &Common) -> CapacityConfig {
    let mut c = CapacityConfig::default();
    if let Some(n) = common.n_mc {
        c.n_mc = n;
    }
    if let Some(ce) = common.centering {
        c.centering = ce;
    }
    c
}

fn layout_of(tasks: &[TaskInstance]) -> Result<TreeLayout> {
    let Some(first) = tasks.first() else { bail!("no tasks") };
    Ok(first.tree.layout())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let seed = common.seed.unwrap_or(0);
    match cli.command {
        Command::GenTasks { height, count } => {
            let tasks = gen_balanced_dataset(height, count, seed)?;
            let mut w = output(&common.out)?;
            write_tasks_jsonl(&tasks, &mut w)?;
            w.flush()?;
        }
        Command::RenderPrompts { tasks, variant } => {
            let tasks = load_tasks(&tasks)?;
            let mut w = output(&common.out)?;
            let system = render_system_prompt(variant);
            for t in &tasks {
                let rec = json!({
                    "task_id": t.task_id,
                    "system": system,
                    "user": render_user_message(t),
                    "reference_cot": render_reference_cot(t, variant),
                });
                writeln!(w, "{rec}")?;
            }
            w.flush()?;
        }
        Command::Parse { transcripts } => {
            let mut w = output(&common.out)?;
            for (task_id, text) in read_transcripts(&transcripts)? {
                for e in parse_transcript(&text) {
                    let mut v = serde_json::to_value(e)?;
                    v["task_id"] = json!(task_id);
                    writeln!(w, "{v}")?;
                }
            }
            w.flush()?;
        }
        Command::Grade { tasks, transcripts } => {
            let tasks = load_tasks(&tasks)?;
            let truth = truth_table(&tasks);
            let mut w = output(&common.out)?;
            let (mut n, mut correct) = (0usize, 0usize);
            for (task_id, text) in read_transcripts(&transcripts)? {
                let t = truth.get(&task_id).with_context(|| format!("unknown task {task_id}"))?;
                let report = grade_transcript(&text, &parse_transcript(&text), t);
                n += 1;
                correct += report.all_correct() as usize;
                writeln!(w, "{}", json!({ "task_id": task_id, "all_correct": report.all_correct(), "report": report }))?;
            }
            w.flush()?;
            eprintln!("graded {n} transcripts, {correct} fully correct");
        }
        Command::Capacity(m) => {
            let (src, tasks) = open_source(&m.dump)?;
            let truth = truth_table(&tasks);
            let cfg = CapacityConfig { seed, ..capacity_config(common) };
            let mut w = output(&common.out)?;
            for layer in layers_or_all(common, &src) {
                let sample = assemble_manifold::<f64>(&src, m.node, m.anchor, layer, &truth)?;
                let est = capacity(&sample, &cfg)?;
                writeln!(w, "{}", json!({ "node": m.node, "anchor": m.anchor.to_string(), "layer": layer, "n_points": sample.n_points(), "estimate": est }))?;
            }
            w.flush()?;
        }
        Command::Probes { manifold: m, kind, repeats, normal } => {
            let (src, tasks) = open_source(&m.dump)?;
            let truth = truth_table(&tasks);
            let cfg = EvalConfig { seed, repeats, ..EvalConfig::default() };
            let mut w = output(&common.out)?;
            for layer in layers_or_all(common, &src) {
                let sample = assemble_manifold::<f64>(&src, m.node, m.anchor, layer, &truth)?;
                let report = probe_report(kind, &sample, &cfg, normal)?;
                writeln!(w, "{}", json!({ "node": m.node, "anchor": m.anchor.to_string(), "layer": layer, "report": report }))?;
            }
            w.flush()?;
        }
        Command::Dims { manifold: m, method } => {
            let (src, tasks) = open_source(&m.dump)?;
            let truth = truth_table(&tasks);
            let mut w = output(&common.out)?;
            for layer in layers_or_all(common, &src) {
                let sample = assemble_manifold::<f64>(&src, m.node, m.anchor, layer, &truth)?;
                let est = match method {
                    DimMethod::TwoNn => twonn_id(sample.points())?,
                    DimMethod::Pr => participation_ratio(sample.points())?,
                };
                writeln!(w, "{}", json!({ "node": m.node, "anchor": m.anchor.to_string(), "layer": layer, "estimate": est }))?;
            }
            w.flush()?;
        }
        Command::Attention { dump, capacity_layer, task_set } => {
            let (src, tasks) = open_source(&dump)?;
            let truth = truth_table(&tasks);
            let layers = match &common.layers {
                Some(l) => l.0.clone(),
                None => stored_attention_layers(&src).context("dump stores no attention rows")?,
            };
            let settings = AttentionSettings { layers, capacity_layer, task_set };
            let (pairs, records) = attention_pairs(&src, &truth, layout_of(&tasks)?, &settings, &capacity_config(common), seed)?;
            let dir = out_dir(&common.out)?;
            write_attention_csv(&records, create(&dir.join("attention.csv"))?)?;
            let corr = |f| attention_capacity_correlation(&pairs, f).map_err(|e| e.to_string());
            let summary = json!({
                "n_pairs": pairs.len(),
                "r_direct_child": corr(RelationFilter::DirectChild).ok(),
                "r_all": corr(RelationFilter::All).ok(),
                "pairs": pairs,
            });
            let mut w = io::stdout().lock();
            writeln!(w, "{}", serde_json::to_string_pretty(&summary)?)?;
            w.flush()?;
        }
        Command::Trace { dump, nodes, anchors } => {
            let (src, tasks) = open_source(&dump)?;
            let truth = truth_table(&tasks);
            let layout = layout_of(&tasks)?;
            let nodes: Vec<u32> = match nodes {
                Some(n) => n.0.into_iter().map(|x| x as u32).collect(),
                None => (1..=layout.node_count()).collect(),
            };
            let anchors = anchors.map(|a| a.0).unwrap_or_else(|| (0..CanonicalLayout::new(layout).len()).collect());
            let cfg = GridConfig { seed, capacity: capacity_config(common), eval: EvalConfig::default() };
            let metric = common.metric.unwrap_or(Metric::Capacity);
            let grid = compute_trace_grid(&src, &truth, metric, &layers_or_all(common, &src), &nodes, &anchors, &cfg)?;
            let failed = grid.cells.iter().filter(|c| c.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} cells failed", grid.cells.len());
            }
            let dir = out_dir(&common.out)?;
            grid.write_csv(create(&dir.join("grid.csv"))?)?;
        }
        Command::Align { grid, height, event, offsets, bootstrap } => {
            let grid = load_grid(&grid, common.metric)?;
            let layout = TreeLayout::new(height)?;
            let dir = out_dir(&common.out)?;
            let events = event.map(|e| vec![e]).unwrap_or_else(|| AlignEvent::ALL.to_vec());
            for event in events {
                let mut traces = Vec::new();
                for &layer in common.layers.as_ref().map(|l| &l.0).unwrap_or(&grid.layers) {
                    let boot = BootstrapConfig { resamples: bootstrap, seed: derive(seed, &[event as u64, layer as u64]) };
                    traces.push(align_traces(&grid, event, layout, layer, offsets.0..=offsets.1, &boot)?);
                }
                write_aligned_csv(&traces, create(&dir.join(format!("aligned_{}.csv", event.slug())))?)?;
            }
        }
        Command::Heatmap { grid, height, offsets, baseline } => {
            let grid = load_grid(&grid, common.metric)?;
            let h = delta_heatmap(&grid, TreeLayout::new(height)?, offsets.0..=offsets.1, baseline.0..=baseline.1)?;
            let dir = out_dir(&common.out)?;
            h.write_csv(create(&dir.join("heatmap.csv"))?)?;
        }
        Command::Synth { tasks, d_model, n_layers, sigma, g_peak, g_tail, recall_gain, width, heads, child_boost } => {
            let tasks = load_tasks(&tasks)?;
            let mut schedule: PulseSchedule = match &common.config {
                Some(p) => serde_json::from_reader(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
                    .with_context(|| format!("parsing schedule {}", p.display()))?,
                None => PulseSchedule::canonical(layout_of(&tasks)?.height(), d_model, n_layers, sigma, g_peak, g_tail, recall_gain, width)?,
            };
            if heads > 0 {
                let layers = common.layers.clone().map(|l| l.0).unwrap_or_else(|| (0..schedule.n_layers).collect());
                schedule.attention = Some(SynthAttention { layers, n_heads: heads, child_boost, jitter: 0.05 });
            }
            let dump = gen_pulse_dump(&schedule, &tasks, seed)?;
            let Some(dir) = &common.out else { bail!("synth needs --out <dir>") };
            write_dump(&dump, dir)?;
        }
        Command::Report => {
            let Some(path) = &common.config else { bail!("report needs --config <path>") };
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg = ReportConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(m) = common.metric {
                cfg.metric = m;
            }
            if let Some(l) = &common.layers {
                cfg.layers = Some(l.0.clone());
            }
            if let Some(n) = common.n_mc {
                cfg.capacity.n_mc = n;
            }
            if let Some(c) = common.centering {
                cfg.capacity.centering = c;
            }
            let dir = out_dir(&common.out)?;
            let manifest = run_report(&cfg, &dir)?;
            eprintln!("wrote {} to {}", manifest.outputs.join(", "), dir.display());
        }
    }
    Ok(())
}

fn stored_attention_layers(src: &Source) -> Option<Vec<usize>> {
    let m = match src {
        Source::Memory(d) => &d.manifest,
        Source::Disk(r) => r.manifest(),
    };
    m.attention.as_ref().map(|a| a.layers.clone())
}

fn load_grid(path: &Path, metric: Option<Metric>) -> Result<TraceGrid> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = read_grid_csv(BufReader::new(f))?;
    Ok(TraceGrid::from_rows(metric.unwrap_or(Metric::Capacity), &rows)?)
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        // A closed downstream pipe (`| head`) is not a failure.
        if e.chain().any(|c| c.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)) {
            return;
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
