use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asd_core::corpus::load_manifest;
use asd_core::segmentation::{clip_refs, segment_clip, utterance_recall, FrontEnd, SegConfig, DEFAULT_MIN_OVERLAP};
use asd_core::synthgen::ground_truth_detections;
use serde_json::Value;

fn asd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = asd(args);
    assert!(
        out.status.success(),
        "asd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small synthetic corpus written through the CLI; returns the manifest path.
fn small_corpus(dir: &Path) -> PathBuf {
    let cfg = dir.join("synth.json");
    fs::write(&cfg, r#"{"dim": 16, "n_clips": 3}"#).unwrap();
    let out = dir.join("corpus");
    let stdout = ok(&["generate", "--config", p(&cfg), "--out", p(&out), "--seed", "3"]);
    PathBuf::from(stdout.trim())
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = asd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = asd(&["segment", "--corpus", p(&dir.path().join("nope.json")), "--out", p(&dir.path().join("h.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
}

#[test]
fn malformed_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let cfg = dir.path().join("seg.json");
    fs::write(&cfg, "{not json").unwrap();
    let out = asd(&["segment", "--corpus", p(&manifest), "--config", p(&cfg), "--out", p(&dir.path().join("h.json"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_of_oracle_detections_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let dets = dir.path().join("oracle.json");
    let corpus = load_manifest(&manifest).unwrap();
    fs::write(&dets, serde_json::to_string(&ground_truth_detections(&corpus)).unwrap()).unwrap();
    let report = dir.path().join("report.json");
    let stdout = ok(&["eval", "--corpus", p(&manifest), "--detections", p(&dets), "--out", p(&report)]);
    assert!(stdout.contains("map_percent 100"));
    let r = json(&report);
    assert_eq!(r["map_percent"].as_f64(), Some(100.0));
    assert!(r["n_groundtruth"].as_u64().unwrap() > 0);
    assert!(!r["config_hash"].as_str().unwrap().is_empty());
}

#[test]
fn segment_recall_matches_in_process_computation() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let out = dir.path().join("hyps.json");
    let stdout = ok(&["segment", "--corpus", p(&manifest), "--out", p(&out)]);
    let printed: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("recall_percent "))
        .unwrap()
        .parse()
        .unwrap();

    let corpus = load_manifest(&manifest).unwrap();
    let (mut hits, mut n) = (0.0, 0usize);
    for clip in &corpus.clips {
        let hyps = segment_clip(clip, FrontEnd::Full, &SegConfig::default()).unwrap();
        let refs = clip_refs(clip);
        hits += utterance_recall(&hyps, &refs, DEFAULT_MIN_OVERLAP) * refs.len() as f64;
        n += refs.len();
    }
    let expected = hits / n as f64;
    assert!((printed - expected).abs() < 1e-9, "{printed} vs {expected}");
    assert!((json(&out)["recall_percent"].as_f64().unwrap() - expected).abs() < 1e-9);
}

#[test]
fn pipeline_runs_end_to_end_and_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = small_corpus(d);
    let train_cfg = d.join("train.json");
    fs::write(
        &train_cfg,
        r#"{"epochs": 3, "lr": 1e-3, "model": {"dim": 16, "ffn_hidden": 32, "max_frames_per_identity": 16}}"#,
    )
    .unwrap();
    let hyps = d.join("hyps.json");
    ok(&["segment", "--corpus", p(&manifest), "--front-end", "groundtruth", "--out", p(&hyps)]);
    for run in ["a", "b"] {
        ok(&["train", "--corpus", p(&manifest), "--config", p(&train_cfg), "--seed", "5", "--out", p(&d.join(run))]);
    }
    let mut compared = 0;
    for entry in fs::read_dir(d.join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "run_manifest.json" {
            continue;
        }
        let (a, b) = (fs::read(d.join("a").join(&name)).unwrap(), fs::read(d.join("b").join(&name)).unwrap());
        assert_eq!(a, b, "{name:?}");
        compared += 1;
    }
    assert!(compared > 10);
    let curve = fs::read_to_string(d.join("a/loss_curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "epoch,loss");
    assert_eq!(lines.len(), 1 + 4);

    let scores = d.join("scores.json");
    ok(&["score", "--corpus", p(&manifest), "--checkpoint", p(&d.join("a")), "--utterances", p(&hyps), "--out", p(&scores)]);
    let report = d.join("report.json");
    ok(&["eval", "--corpus", p(&manifest), "--utterances", p(&hyps), "--scores", p(&scores), "--out", p(&report)]);
    let r = json(&report);
    assert_eq!(r["recall_percent"].as_f64(), Some(100.0));
    assert_eq!(r["front_end"].as_str(), Some("groundtruth"));
    let m = r["map_percent"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&m));

    let outputs = [
        hyps.clone(),
        scores.clone(),
        report.clone(),
        d.join("a/index.json"),
        d.join("a/train_report.json"),
        d.join("a/run_manifest.json"),
        d.join("report.json.run.json"),
        d.join("corpus/run_manifest.json"),
    ];
    for f in outputs {
        let v = json(&f);
        assert!(v["config_hash"].as_str().is_some_and(|h| h.len() == 16), "{}", f.display());
    }
    assert_eq!(json(&d.join("a/run_manifest.json"))["seed"].as_u64(), Some(5));
}

#[test]
fn finetune_writes_projections_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_corpus(dir.path());
    let cfg = dir.path().join("ft.json");
    fs::write(&cfg, r#"{"rounds": 1, "k": 4, "steps_per_round": 10}"#).unwrap();
    let out = dir.path().join("proj");
    ok(&["finetune", "--corpus", p(&manifest), "--config", p(&cfg), "--out", p(&out)]);
    let r = json(&out.join("finetune_report.json"));
    assert_eq!(r["rounds"].as_array().unwrap().len(), 1);
    assert!(out.join("face.w.fvem").exists());
}
