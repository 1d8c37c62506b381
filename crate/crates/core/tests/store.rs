use std::fs::OpenOptions;

use proptest::prelude::*;

use cotgeo::logic::gen_balanced_dataset;
use cotgeo::store::{
    assemble_manifold, read_dump, read_manifest, truth_table, write_dump, ActivationDump, AnchorSelector, DumpReader, ResidualSource,
    StoreError,
};
use cotgeo::synth::{gen_pulse_dump, PulseSchedule, SynthAttention};
use cotgeo::transcript::{AnchorKind, Phase};

fn small_dump(with_attention: bool) -> (ActivationDump, Vec<cotgeo::logic::TaskInstance>) {
    let tasks = gen_balanced_dataset(2, 6, 21).unwrap();
    let mut schedule = PulseSchedule::canonical(2, 6, 3, 1.0, 5.0, 1.0, 1.0, 6.0).unwrap();
    if with_attention {
        schedule.attention = Some(SynthAttention { layers: vec![0, 2], n_heads: 2, child_boost: 2.0, jitter: 0.05 });
    }
    (gen_pulse_dump(&schedule, &tasks, 13).unwrap(), tasks)
}

#[test]
fn pulse_dump_round_trips_through_disk() {
    for attention in [false, true] {
        let (dump, _) = small_dump(attention);
        let dir = tempfile::tempdir().unwrap();
        write_dump(&dump, dir.path()).unwrap();
        assert_eq!(read_dump(dir.path()).unwrap(), dump);
        assert_eq!(read_manifest(dir.path()).unwrap(), dump.manifest);

        let reader = DumpReader::open(dir.path()).unwrap();
        for t in 0..dump.tasks.len() {
            assert_eq!(reader.attention(t).unwrap(), dump.tasks[t].attention);
            assert_eq!(reader.tokens(t), dump.tasks[t].tokens.as_slice());
        }
    }
}

#[test]
fn manifold_from_disk_equals_manifold_from_memory() {
    let (dump, tasks) = small_dump(false);
    let dir = tempfile::tempdir().unwrap();
    write_dump(&dump, dir.path()).unwrap();
    let reader = DumpReader::open(dir.path()).unwrap();
    let truth = truth_table(&tasks);
    let sel = AnchorSelector::solve(1, AnchorKind::Result);
    for layer in 0..3 {
        let a = assemble_manifold::<f64>(&dump, 1, sel, layer, &truth).unwrap();
        let b = assemble_manifold::<f64>(&reader, 1, sel, layer, &truth).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(a.labels(), b.labels());
    }
}

#[test]
fn truncated_activation_file_is_detected() {
    let (dump, _) = small_dump(false);
    let dir = tempfile::tempdir().unwrap();
    write_dump(&dump, dir.path()).unwrap();
    let id = &dump.tasks[0].task_id;
    let path = dir.path().join(format!("acts_{id}.bin"));
    let len = std::fs::metadata(&path).unwrap().len();
    OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 4).unwrap();
    match read_dump(dir.path()) {
        Err(StoreError::Truncated { expected, got, .. }) => assert_eq!((expected, got), (len, len - 4)),
        other => panic!("{other:?}"),
    }
    assert!(matches!(DumpReader::open(dir.path()), Err(StoreError::Truncated { .. })));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_dump(dir.path()).is_err());
}

#[test]
fn selector_strings() {
    let cases = [
        ("#4", AnchorSelector::Ordinal(4)),
        ("12", AnchorSelector::Ordinal(12)),
        ("solve/result/3", AnchorSelector::solve(3, AnchorKind::Result)),
        ("Solve/Header/1", AnchorSelector::solve(1, AnchorKind::Header)),
        ("recall_summary/summary/2", AnchorSelector::Event { phase: Phase::RecallSummary, kind: AnchorKind::SummaryLine, node_id: Some(2) }),
        ("final/final", AnchorSelector::Event { phase: Phase::Final, kind: AnchorKind::FinalAnswer, node_id: None }),
    ];
    for (s, want) in cases {
        assert_eq!(s.parse::<AnchorSelector>().unwrap(), want, "{s}");
    }
    for bad in ["", "solve", "solve/result/x", "think/result/1", "solve/result/1/2"] {
        assert!(bad.parse::<AnchorSelector>().is_err(), "{bad}");
    }
}

fn selector_strategy() -> impl Strategy<Value = AnchorSelector> {
    let phase = prop::sample::select(vec![Phase::Solve, Phase::RecallSummary, Phase::Final]);
    let kind = prop::sample::select(vec![
        AnchorKind::Header,
        AnchorKind::Logic,
        AnchorKind::Result,
        AnchorKind::SummaryLine,
        AnchorKind::FinalAnswer,
    ]);
    prop_oneof![
        (0usize..10_000).prop_map(AnchorSelector::Ordinal),
        (phase, kind, prop::option::of(1u32..200)).prop_map(|(phase, kind, node_id)| AnchorSelector::Event { phase, kind, node_id }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selector_display_parses_back(sel in selector_strategy()) {
        prop_assert_eq!(sel.to_string().parse::<AnchorSelector>().unwrap(), sel);
    }

    #[test]
    fn reader_slices_equal_in_memory_rows(task in 0usize..6, layer in 0usize..3, frac in 0.0f64..1.0) {
        let (dump, _) = small_dump(false);
        let dir = tempfile::tempdir().unwrap();
        write_dump(&dump, dir.path()).unwrap();
        let reader = DumpReader::open(dir.path()).unwrap();
        let token = ((dump.tasks[task].n_tokens as f64 - 1.0) * frac) as usize;
        let slice = reader.slice(task, layer, token).unwrap();
        prop_assert_eq!(slice.as_slice(), dump.residual(task, layer, token));
        let mut buf = vec![0f32; dump.manifest.d_model];
        reader.read_residual(task, layer, token, &mut buf).unwrap();
        prop_assert_eq!(buf.as_slice(), dump.residual(task, layer, token));
        prop_assert!(reader.slice(task, 3, token).is_err());
        prop_assert!(reader.slice(task, layer, dump.tasks[task].n_tokens).is_err());
    }
}
