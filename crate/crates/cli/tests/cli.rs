use std::path::Path;
use std::process::{Command, Output};

fn ehrseq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehrseq")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn error_line(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(err.lines().count(), 1, "one error line expected: {err}");
    assert!(err.starts_with("error kind="), "{err}");
    err
}

/// Synthesizes a small high-event cohort and preprocesses it into `prep`.
fn prepared(dir: &Path, preset: &str) {
    std::fs::write(dir.join("synth.json"), r#"{"n_patients": 300, "event_rate": 0.25}"#).unwrap();
    ok(&ehrseq(&["synth", "--config", "synth.json", "--seed", "4", "--out", "data/raw.csv"], dir));
    ok(&ehrseq(&["preprocess", "--input", "data/raw.csv", "--preset", preset, "--seed", "4", "--out", "prep"], dir));
}

#[test]
fn full_pipeline_writes_metrics_and_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepared(dir, "exp1.1");
    for f in ["train.csv", "validation.csv", "test.csv", "preprocess.json", "config.json"] {
        assert!(dir.join("prep").join(f).exists(), "{f}");
    }
    ok(&ehrseq(&["train", "--data", "prep", "--preset", "exp1.1", "--epochs", "2", "--out", "run"], dir));
    assert_eq!(std::fs::read_to_string(dir.join("run/history.jsonl")).unwrap().lines().count(), 2);
    ok(&ehrseq(&["eval", "--model", "run/model.json", "--data", "prep", "--out", "eval1"], dir));
    ok(&ehrseq(&["eval", "--model", "run/model.json", "--data", "prep", "--out", "eval2"], dir));
    let a = std::fs::read(dir.join("eval1/metrics.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("eval2/metrics.json")).unwrap());
    let metrics: serde_json::Value = serde_json::from_slice(&a).unwrap();
    for level in ["observation", "encounter"] {
        let auroc = metrics[level]["auroc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auroc));
    }
    // the echoed config reproduces the run
    let echoed: ehrseq_core::pipeline::RunConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/config.json")).unwrap()).unwrap();
    assert_eq!(echoed.train.epochs, 2);
    assert!(dir.join("eval1/config.json").exists());
}

#[test]
fn identical_configs_give_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepared(dir, "exp1.3");
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        ok(&ehrseq(&["train", "--data", "prep", "--preset", "exp1.3", "--epochs", "1", "--seed", "2", "--out", run], dir));
        let model = format!("{run}/model.json");
        metrics.push(ok(&ehrseq(&["eval", "--model", &model, "--data", "prep"], dir)));
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn batch_inspect_and_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepared(dir, "exp1.1");
    let text = ok(&ehrseq(&["batch", "--data", "prep", "--method", "dense", "--timestamp", "6", "--inspect"], dir));
    assert!(text.starts_with("method=dense"));
    assert!(text.lines().nth(1).unwrap().contains(", 6, 10]"), "{text}");
    ok(&ehrseq(&["batch", "--data", "prep", "--method", "smart", "--batch-size", "8", "--out", "dump.json"], dir));
    let dump: ehrseq_core::batching::BatchDump =
        serde_json::from_str(&std::fs::read_to_string(dir.join("dump.json")).unwrap()).unwrap();
    assert_eq!(dump.method, "smart");
    assert!(dump.to_batch_set().unwrap().n_samples() > 0);
}

#[test]
fn gradcheck_reports_small_error() {
    let tmp = tempfile::tempdir().unwrap();
    for arch in ["lstm", "transformer"] {
        let text = ok(&ehrseq(&["gradcheck", "--arch", arch, "--seed", "7"], tmp.path()));
        let err: f64 = text.trim().strip_prefix("max_relative_error=").unwrap().parse().unwrap();
        assert!(err < 1e-4, "{arch}: {err}");
    }
}

#[test]
fn width_mismatch_names_both_widths() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepared(dir, "exp1.3"); // granular with a time-difference column: 11 inputs
    ok(&ehrseq(&["train", "--data", "prep", "--preset", "exp1.3", "--epochs", "1", "--out", "wide"], dir));
    ok(&ehrseq(&["preprocess", "--input", "data/raw.csv", "--preset", "exp1.1", "--out", "narrow"], dir));
    let out = ehrseq(&["train", "--data", "narrow", "--resume", "wide/model.json", "--epochs", "1", "--out", "x"], dir);
    assert_eq!(out.status.code(), Some(5));
    let err = error_line(&out);
    assert!(err.contains("kind=shape") && err.contains("11") && err.contains("10"), "{err}");
}

#[test]
fn exit_codes_by_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = ehrseq(&["train", "--no-such-flag"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("kind=usage"));

    let out = ehrseq(&["preprocess", "--input", "missing.csv", "--schema", "missing.json", "--out", "p"], dir);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out).contains("kind=io"));

    std::fs::write(dir.join("bad.json"), r#"{"n_patients": 0}"#).unwrap();
    let out = ehrseq(&["synth", "--config", "bad.json", "--out", "x.csv"], dir);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).contains("kind=config"));

    let out = ehrseq(&["train", "--data", ".", "--preset", "exp7", "--out", "r"], dir);
    assert_eq!(out.status.code(), Some(4));

    std::fs::write(dir.join("raw.csv"), "patient_id,encounter_id,time_hours,age,target\nP1,E1,oops,3,0\n").unwrap();
    std::fs::write(dir.join("raw.schema.json"), r#"{"features": [{"name": "age", "kind": "continuous"}], "target": "target"}"#)
        .unwrap();
    let out = ehrseq(&["preprocess", "--input", "raw.csv", "--out", "p"], dir);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(error_line(&out).contains("kind=data"));
}
