//! End-to-end command-line tests: pipeline wiring, determinism of
//! produced artifacts, and failure exits.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_genreg")
}

struct TempDir(PathBuf);

impl TempDir {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("genreg_cli_{tag}_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        std::fs::create_dir_all(&dir).unwrap();
        TempDir(dir)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.0).ok();
    }
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("spawn genreg");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_fail(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().expect("spawn genreg");
    assert!(!out.status.success(), "command {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_runs_and_reports() {
    let dir = TempDir::new("pipeline");
    let data = dir.path("data.csv");
    let vocab = dir.path("vocab.json");
    let ckpt = dir.path("gr.ckpt");
    let preds = dir.path("preds.csv");
    let eval_dir = dir.path("eval");

    run_ok(&["synth-data", "--n", "300", "--d", "4", "--seed", "3", "--out", p(&data)]);
    let out = run_ok(&["build-vocab", "--data", p(&data), "--strategy", "dynamic", "--out", p(&vocab)]);
    assert!(out.contains("value tokens"), "{out}");

    let check = run_ok(&["encode-check", "--data", p(&data), "--vocab", p(&vocab)]);
    assert!(check.contains("pct_within_tolerance     100.00"), "{check}");

    run_ok(&[
        "train", "--data", p(&data), "--vocab", p(&vocab), "--out", p(&ckpt),
        "--head", "gr", "--steps", "60", "--eval-interval", "30", "--seed", "3",
    ]);
    assert!(ckpt.exists());
    assert!(dir.path("gr.ckpt.metrics.jsonl").exists());
    assert!(dir.path("gr.ckpt.manifest.json").exists());

    run_ok(&["predict", "--ckpt", p(&ckpt), "--vocab", p(&vocab), "--data", p(&data), "--out", p(&preds)]);
    let csv = std::fs::read_to_string(&preds).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "row_id,y_pred,tokens,terminated_by");
    assert_eq!(csv.lines().count(), 301);

    run_ok(&[
        "evaluate", "--ckpt", p(&ckpt), "--vocab", p(&vocab), "--data", p(&data),
        "--out-dir", p(&eval_dir),
    ]);
    for file in ["report.json", "interval_mae.csv", "neighbor_prob_diff.csv", "value_embeddings.csv"] {
        assert!(eval_dir.join(file).exists(), "missing {file}");
    }
    let report = std::fs::read_to_string(eval_dir.join("report.json")).unwrap();
    assert!(report.contains("\"mae\""));
    assert!(report.contains("\"xauc\""));
}

#[test]
fn artifacts_are_byte_identical_across_reruns() {
    let dir = TempDir::new("determinism");
    let data = dir.path("data.csv");
    run_ok(&["synth-data", "--n", "200", "--d", "3", "--seed", "11", "--out", p(&data)]);

    let run_once = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let vocab = dir.path(&format!("vocab_{tag}.json"));
        let ckpt = dir.path(&format!("m_{tag}.ckpt"));
        run_ok(&["build-vocab", "--data", p(&data), "--strategy", "dynamic", "--out", p(&vocab)]);
        run_ok(&[
            "train", "--data", p(&data), "--vocab", p(&vocab), "--out", p(&ckpt),
            "--head", "gr", "--steps", "40", "--eval-interval", "20", "--seed", "5",
        ]);
        (
            std::fs::read(&vocab).unwrap(),
            std::fs::read(&ckpt).unwrap(),
            std::fs::read(dir.path(&format!("m_{tag}.ckpt.metrics.jsonl"))).unwrap(),
        )
    };
    let (v1, c1, l1) = run_once("a");
    let (v2, c2, l2) = run_once("b");
    assert_eq!(v1, v2, "vocabulary bytes differ");
    assert_eq!(c1, c2, "checkpoint bytes differ");
    assert_eq!(l1, l2, "metrics log bytes differ");
}

#[test]
fn degenerate_curriculum_flags_match_teacher_forcing() {
    // train --schedule fixed --p 1 --nw 0 must equal a curriculum-off run.
    let dir = TempDir::new("degenerate");
    let data = dir.path("data.csv");
    run_ok(&["synth-data", "--n", "160", "--d", "3", "--seed", "2", "--out", p(&data)]);
    let vocab = dir.path("vocab.json");
    run_ok(&["build-vocab", "--data", p(&data), "--strategy", "dynamic", "--out", p(&vocab)]);

    let clem = dir.path("clem.ckpt");
    run_ok(&[
        "train", "--data", p(&data), "--vocab", p(&vocab), "--out", p(&clem),
        "--head", "gr", "--steps", "30", "--eval-interval", "15", "--seed", "4",
        "--schedule", "fixed", "--p", "1", "--nw", "0",
    ]);
    let tf = dir.path("tf.ckpt");
    run_ok(&[
        "train", "--data", p(&data), "--vocab", p(&vocab), "--out", p(&tf),
        "--head", "gr", "--steps", "30", "--eval-interval", "15", "--seed", "4",
        "--clem", "off", "--nw", "0",
    ]);
    let log_a = std::fs::read_to_string(dir.path("clem.ckpt.metrics.jsonl")).unwrap();
    let log_b = std::fs::read_to_string(dir.path("tf.ckpt.metrics.jsonl")).unwrap();
    // Loss columns agree line by line (the p column differs by design).
    for (a, b) in log_a.lines().zip(log_b.lines()) {
        let get = |s: &str, key: &str| -> String {
            let start = s.find(&format!("\"{key}\":")).unwrap() + key.len() + 3;
            s[start..].chars().take_while(|c| *c != ',' && *c != '}').collect()
        };
        assert_eq!(get(a, "ce1"), get(b, "ce1"));
        assert_eq!(get(a, "ce2"), get(b, "ce2"));
        assert_eq!(get(a, "huber"), get(b, "huber"));
        assert_eq!(get(a, "val_mae"), get(b, "val_mae"));
    }
}

#[test]
fn baseline_heads_train_via_same_command() {
    let dir = TempDir::new("heads");
    let data = dir.path("data.csv");
    run_ok(&["synth-data", "--n", "150", "--d", "3", "--seed", "6", "--out", p(&data)]);
    for head in ["vr", "ordinal"] {
        let ckpt = dir.path(&format!("{head}.ckpt"));
        run_ok(&[
            "train", "--data", p(&data), "--out", p(&ckpt), "--head", head,
            "--steps", "40", "--eval-interval", "20", "--seed", "6",
        ]);
        let preds = dir.path(&format!("{head}_preds.csv"));
        run_ok(&["predict", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&preds)]);
        let eval_dir = dir.path(&format!("{head}_eval"));
        run_ok(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&data), "--out-dir", p(&eval_dir)]);
        assert!(eval_dir.join("report.json").exists());
    }
}

#[test]
fn usage_and_file_errors_exit_nonzero() {
    let dir = TempDir::new("errors");
    let data = dir.path("data.csv");
    run_ok(&["synth-data", "--n", "50", "--d", "2", "--seed", "1", "--out", p(&data)]);

    // Manual strategy without --values.
    let err = run_fail(&[
        "build-vocab", "--data", p(&data), "--strategy", "manual",
        "--out", p(&dir.path("v.json")),
    ]);
    assert!(err.contains("--values"), "{err}");

    // Unreadable input.
    let err = run_fail(&[
        "build-vocab", "--data", p(&dir.path("missing.csv")), "--strategy", "dynamic",
        "--out", p(&dir.path("v.json")),
    ]);
    assert!(err.contains("error"), "{err}");

    // Evaluating a missing checkpoint.
    let err = run_fail(&[
        "evaluate", "--ckpt", p(&dir.path("missing.ckpt")), "--data", p(&data),
        "--out-dir", p(&dir.path("eval")),
    ]);
    assert!(err.contains("error"), "{err}");

    // gr checkpoint against the wrong vocabulary fingerprint.
    let vocab = dir.path("vocab.json");
    run_ok(&["build-vocab", "--data", p(&data), "--strategy", "dynamic", "--out", p(&vocab)]);
    let ckpt = dir.path("gr.ckpt");
    run_ok(&[
        "train", "--data", p(&data), "--vocab", p(&vocab), "--out", p(&ckpt),
        "--head", "gr", "--steps", "10", "--eval-interval", "10", "--seed", "1",
    ]);
    let other_vocab = dir.path("other.json");
    run_ok(&["build-vocab", "--data", p(&data), "--strategy", "binary", "--out", p(&other_vocab)]);
    let err = run_fail(&[
        "predict", "--ckpt", p(&ckpt), "--vocab", p(&other_vocab), "--data", p(&data),
        "--out", p(&dir.path("preds.csv")),
    ]);
    assert!(err.contains("does not match checkpoint"), "{err}");
}

#[test]
fn ablate_writes_grid_table() {
    let dir = TempDir::new("ablate");
    let out_dir = dir.path("grid");
    run_ok(&[
        "ablate", "--out-dir", p(&out_dir), "--n", "120", "--d", "3",
        "--seed", "2", "--steps", "20",
    ]);
    let table = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "row,label,val_mae,val_xauc,test_mae,test_xauc");
    assert_eq!(lines.len(), 9, "eight ablation rows expected:\n{table}");
    for label in [
        "full",
        "no_curriculum",
        "mixup_with_teacher_forcing",
        "curriculum_without_mixup",
        "linear_decay",
        "exponential_decay",
        "fixed_p_0.5",
        "free_running",
    ] {
        assert!(table.contains(label), "missing {label}");
    }
}

#[test]
fn train_split_evaluates_better_than_fresh_data() {
    let dir = TempDir::new("overfit_gap");
    let train_csv = dir.path("train.csv");
    let test_csv = dir.path("test.csv");
    run_ok(&["synth-data", "--n", "240", "--d", "3", "--seed", "8", "--out", p(&train_csv)]);
    run_ok(&["synth-data", "--n", "240", "--d", "3", "--seed", "1008", "--out", p(&test_csv)]);
    let vocab = dir.path("vocab.json");
    run_ok(&["build-vocab", "--data", p(&train_csv), "--strategy", "dynamic", "--out", p(&vocab)]);
    let ckpt = dir.path("gr.ckpt");
    run_ok(&[
        "train", "--data", p(&train_csv), "--vocab", p(&vocab), "--out", p(&ckpt),
        "--head", "gr", "--steps", "400", "--eval-interval", "100", "--seed", "8",
        "--batch", "16",
    ]);
    let mae_of = |data: &std::path::Path, tag: &str| -> f64 {
        let out_dir = dir.path(tag);
        run_ok(&[
            "evaluate", "--ckpt", p(&ckpt), "--vocab", p(&vocab), "--data", p(data),
            "--out-dir", p(&out_dir),
        ]);
        let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
        let needle = "\"mae\": ";
        let start = report.find(needle).unwrap() + needle.len();
        report[start..]
            .chars()
            .take_while(|c| *c != ',' && *c != '\n')
            .collect::<String>()
            .trim()
            .parse()
            .unwrap()
    };
    let train_mae = mae_of(&train_csv, "eval_train");
    let test_mae = mae_of(&test_csv, "eval_test");
    assert!(
        train_mae < test_mae,
        "expected overfit gap, got train {train_mae} vs test {test_mae}"
    );
}
