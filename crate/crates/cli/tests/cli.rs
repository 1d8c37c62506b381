use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cotgeo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotgeo")).current_dir(dir).args(args).output().expect("spawn cotgeo")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cotgeo(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

const SCHEDULE: &str = r#"{
  "sigma": 1.0, "d_model": 8, "n_layers": 3, "layer_profile": [0.0, 1.0, 1.0],
  "nodes": [
    {"node_id": 1, "solve_anchor": 2, "recall_anchors": [7, 9], "g_peak": 6.0, "width": 6.0},
    {"node_id": 2, "solve_anchor": 5, "recall_anchors": [7, 10], "g_peak": 6.0, "width": 6.0},
    {"node_id": 3, "solve_anchor": 8, "recall_anchors": [11], "g_peak": 6.0, "width": 6.0}
  ],
  "attention": {"layers": [1, 2], "n_heads": 2, "child_boost": 2.0, "jitter": 0.05}
}"#;

#[test]
fn stage_by_stage_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-tasks", "--height", "2", "--count", "24", "--seed", "3", "--out", "tasks.jsonl"]);
    assert_eq!(fs::read_to_string(d.join("tasks.jsonl")).unwrap().lines().count(), 24);

    // Reference transcripts as model output: parse and grade must agree with the tasks.
    let prompts = ok(d, &["render-prompts", "--tasks", "tasks.jsonl"]);
    let mut transcripts = String::new();
    for line in prompts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["system"].as_str().unwrap().len() > 100);
        transcripts.push_str(&serde_json::json!({"task_id": v["task_id"], "text": v["reference_cot"]}).to_string());
        transcripts.push('\n');
    }
    fs::write(d.join("transcripts.jsonl"), transcripts).unwrap();
    let anchors = ok(d, &["parse", "--transcripts", "transcripts.jsonl"]);
    assert_eq!(anchors.lines().count(), 24 * 13);
    let grades = ok(d, &["grade", "--tasks", "tasks.jsonl", "--transcripts", "transcripts.jsonl"]);
    assert!(grades.lines().all(|l| l.contains("\"all_correct\":true")));

    fs::write(d.join("schedule.json"), SCHEDULE).unwrap();
    ok(d, &["synth", "--tasks", "tasks.jsonl", "--config", "schedule.json", "--seed", "1", "--out", "dump"]);
    assert!(d.join("dump/manifest.json").exists());

    let cap = ok(d, &["capacity", "--dump", "dump", "--tasks", "tasks.jsonl", "--node", "1", "--anchor", "solve/result/1", "--layers", "0..=1", "--n-mc", "50"]);
    let alphas: Vec<f64> = cap
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["estimate"]["alpha"].as_f64().unwrap())
        .collect();
    assert_eq!(alphas.len(), 2);
    assert!(alphas[1] > alphas[0], "planted layer 1 beats silent layer 0: {alphas:?}");

    let probes = ok(d, &["probes", "--dump", "dump", "--tasks", "tasks.jsonl", "--node", "1", "--anchor", "#2", "--layers", "1", "--normal"]);
    let p: serde_json::Value = serde_json::from_str(probes.trim()).unwrap();
    assert_eq!(p["report"]["normal"].as_array().unwrap().len(), 8);
    let dims = ok(d, &["dims", "--dump", "dump", "--tasks", "tasks.jsonl", "--node", "2", "--anchor", "#5", "--method", "pr", "--layers", "0,2"]);
    assert_eq!(dims.lines().count(), 2);

    ok(d, &["trace", "--dump", "dump", "--tasks", "tasks.jsonl", "--layers", "1..3", "--n-mc", "40", "--out", "run"]);
    let grid = csv_rows(&d.join("run/grid.csv"));
    assert_eq!(grid[0], ["node", "anchor", "layer", "value", "se", "flag"]);
    assert_eq!(grid.len() - 1, 3 * 13 * 2);

    ok(d, &["align", "--grid", "run/grid.csv", "--height", "2", "--offsets", "-2..=3", "--bootstrap", "50", "--out", "run"]);
    let aligned = csv_rows(&d.join("run/aligned_self_solve.csv"));
    assert_eq!(aligned.len() - 1, 2 * 6);
    assert!(d.join("run/aligned_parent_recall.csv").exists() && d.join("run/aligned_summary.csv").exists());

    ok(d, &["heatmap", "--grid", "run/grid.csv", "--height", "2", "--offsets", "-3..=4", "--baseline", "-3..=-1", "--out", "run"]);
    assert_eq!(csv_rows(&d.join("run/heatmap.csv"))[0], ["layer", "offset", "delta", "n_nodes"]);

    let att = ok(d, &["attention", "--dump", "dump", "--tasks", "tasks.jsonl", "--capacity-layer", "1", "--n-mc", "40", "--out", "run"]);
    let a: serde_json::Value = serde_json::from_str(&att).unwrap();
    assert_eq!(a["n_pairs"], 3);
    // Two direct-child pairs at h = 2 are too few for a correlation; all three pairs suffice.
    assert!(a["r_direct_child"].is_null());
    assert!(a["r_all"].as_f64().is_some());
    assert!(csv_rows(&d.join("run/attention.csv")).len() > 24 * 3);
}

#[test]
fn report_runs_end_to_end_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = format!(
        r#"{{"seed": 9, "dataset": {{"generate": {{"height": 2, "count": 24}}}}, "dump": {{"synthetic": {SCHEDULE}}},
            "layers": [1, 2], "capacity": {{"n_mc": 40}}, "align": {{"offsets": [-2, 3], "bootstrap": 50}},
            "attention": {{"layers": [1, 2], "capacity_layer": 1}}}}"#
    );
    fs::write(d.join("report.json"), cfg).unwrap();
    ok(d, &["report", "--config", "report.json", "--out", "a"]);
    ok(d, &["report", "--config", "report.json", "--out", "b"]);
    let mut names: Vec<String> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert!(names.contains(&"run_manifest.json".to_string()) && names.contains(&"grid.csv".to_string()), "{names:?}");
    for n in &names {
        assert_eq!(fs::read(d.join("a").join(n)).unwrap(), fs::read(d.join("b").join(n)).unwrap(), "{n} differs");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_tasks"], 24);
    assert_eq!(manifest["config"]["seed"], 9);

    // A global flag overrides the config.
    ok(d, &["report", "--config", "report.json", "--seed", "10", "--out", "c"]);
    assert_ne!(fs::read(d.join("a/grid.csv")).unwrap(), fs::read(d.join("c/grid.csv")).unwrap());
}

#[test]
fn missing_dump_fails_in_the_capture_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("report.json"), r#"{"seed": 1, "dataset": {"generate": {"height": 2, "count": 8}}, "dump": {"path": "no_such_dump"}}"#)
        .unwrap();
    let out = cotgeo(d, &["report", "--config", "report.json", "--out", "r"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("capture stage failed"), "{err}");
    assert!(err.contains("no_such_dump"), "{err}");
}

#[test]
fn malformed_arguments_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        &["capacity", "--dump", "x", "--tasks", "y", "--node", "1", "--anchor", "solve/result/1", "--layers", "3..1"][..],
        &["capacity", "--dump", "x", "--tasks", "y", "--node", "1", "--anchor", "nowhere/1"][..],
        &["align", "--grid", "g.csv", "--height", "2", "--offsets", "a..=b"][..],
        &["trace", "--dump", "x", "--tasks", "y", "--metric", "volume"][..],
    ] {
        let out = cotgeo(d, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = cotgeo(d, &["gen-tasks", "--height", "0", "--count", "4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
