mod common;

use std::path::PathBuf;

use common::{point, TABLE};
use dar_core::harness::{compare, run_stream, sweep, CurvePoint, CurveSet, SweepConfig, DEFAULT_STEP_FRAMES};
use dar_core::latency::{average_lagging, DelayVector};
use dar_core::model::{save_checkpoint, CheckpointMeta, Model, ModelConfig};
use dar_core::policy::{EncoderMode, Event, StreamInput};
use dar_core::training::{generate_dataset, PairedExample, SyntheticTaskSpec};
use dar_core::Error;

fn model_config() -> ModelConfig {
    ModelConfig {
        vocab_src: 10,
        vocab_tgt: 10,
        feat_dim: 4,
        embed_dim: 16,
        ffn_dim: 32,
        heads: 2,
        ..Default::default()
    }
}

fn test_set(n: usize) -> Vec<PairedExample> {
    let spec = SyntheticTaskSpec {
        src_vocab: 10,
        tgt_vocab: 10,
        feat_dim: 4,
        max_len: 8,
        n_train: 0,
        n_dev: 0,
        n_test: n,
        ..Default::default()
    };
    generate_dataset(&spec).unwrap().test
}

fn checkpoint(dir: &std::path::Path, name: &str, seed: u64) -> PathBuf {
    let path = dir.join(format!("{name}.json"));
    let model = Model::new(model_config(), seed).unwrap();
    let meta = CheckpointMeta {
        name: name.into(),
        lambda: 0.0,
        seed,
        step: 0,
        task_hash: String::new(),
    };
    save_checkpoint(&path, &model, meta).unwrap();
    path
}

#[test]
fn oversized_step_reads_once() {
    let model = Model::new(model_config(), 1).unwrap();
    for ex in test_set(10) {
        let t = ex.frames.len();
        let trace = run_stream(&model, StreamInput::Speech(&ex.frames), t + 5, EncoderMode::CausalIncremental).unwrap();
        assert_eq!(trace.reads(), 1);
        assert!(trace.delays.iter().all(|&d| d == t));
    }
}

#[test]
fn delays_fall_on_read_boundaries() {
    let model = Model::new(model_config(), 2).unwrap();
    for ex in test_set(20) {
        let t = ex.frames.len();
        for step in [3, 4, 7] {
            let trace = run_stream(&model, StreamInput::Speech(&ex.frames), step, EncoderMode::CausalIncremental).unwrap();
            assert!(trace.delays.iter().all(|&d| d % step == 0 || d == t));
            assert_eq!(trace.events.iter().filter(|e| matches!(e, Event::Read(_))).count(), trace.reads());
        }
    }
}

#[test]
fn zero_step_is_rejected() {
    let model = Model::new(model_config(), 2).unwrap();
    let ex = &test_set(1)[0];
    let err = run_stream(&model, StreamInput::Speech(&ex.frames), 0, EncoderMode::CausalIncremental);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn incremental_and_reencoded_streams_agree() {
    let model = Model::new(model_config(), 3).unwrap();
    for ex in test_set(100) {
        let a = run_stream(&model, StreamInput::Speech(&ex.frames), 4, EncoderMode::CausalIncremental).unwrap();
        let b = run_stream(&model, StreamInput::Speech(&ex.frames), 4, EncoderMode::ReencodePrefix).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn always_write_lag_grows_with_step() {
    let mut model = Model::new(model_config(), 4).unwrap();
    model.set_constant_policy(60.0);
    let ex = test_set(50).into_iter().find(|e| e.frames.len() > 24).expect("a long example");
    let mut prev = f64::NEG_INFINITY;
    for step in DEFAULT_STEP_FRAMES {
        let trace = run_stream(&model, StreamInput::Speech(&ex.frames), step, EncoderMode::CausalIncremental).unwrap();
        let al = average_lagging(&DelayVector::from_counts(&trace.delays, ex.frames.len()).unwrap());
        assert!(al > prev, "step {step}: AL {al} after {prev}");
        prev = al;
    }
}

#[test]
fn sweep_covers_every_checkpoint_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        checkpoints: vec![checkpoint(dir.path(), "a", 1), checkpoint(dir.path(), "b", 2)],
        out: dir.path().join("sweep"),
        ..Default::default()
    };
    let test = test_set(6);
    let set = sweep(&cfg, &test, 1, "hash").unwrap();
    assert_eq!(set.points.len(), 12);
    let csv = CurveSet::read(&cfg.out.join("curves.csv")).unwrap();
    let json = CurveSet::read(&cfg.out.join("curves.json")).unwrap();
    assert_eq!(csv.points, set.points);
    assert_eq!(json, set);

    let again = sweep(&cfg, &test, 1, "hash").unwrap();
    assert_eq!(again.points, set.points);
}

#[test]
fn missing_checkpoint_keeps_earlier_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SweepConfig {
        checkpoints: vec![
            checkpoint(dir.path(), "a", 1),
            dir.path().join("absent.json"),
            checkpoint(dir.path(), "b", 2),
        ],
        step_frames: vec![4, 8],
        out: dir.path().join("sweep"),
        ..Default::default()
    };
    let err = sweep(&cfg, &test_set(4), 1, "hash");
    assert!(matches!(err, Err(Error::MissingCheckpoint(_))));
    let partial = CurveSet::read(&cfg.out.join("curves.json")).unwrap();
    assert_eq!(partial.points.len(), 2);
    assert!(partial.points.iter().all(|p| p.model == "a"));
}

#[test]
fn published_curves_compare_as_reported() {
    let base: Vec<CurvePoint> = TABLE.iter().map(|r| point("mma", r.1, r.0)).collect();
    let treat: Vec<CurvePoint> = TABLE.iter().rev().map(|r| point("dar", r.3, r.2)).collect();
    let c = compare(&base, &treat).unwrap();
    assert_eq!(c.pairs.len(), 10);
    assert_eq!(c.unpaired, 0);
    for (p, r) in c.pairs.iter().zip(TABLE) {
        assert_eq!((p.baseline_al, p.treatment_al), (r.1, r.3));
    }
    assert!((c.mean_delta - 4.5).abs() < 0.05, "{}", c.mean_delta);
    assert!((c.mean_percent.unwrap() - 34.66).abs() < 0.05, "{:?}", c.mean_percent);
}
