use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hyperbrain"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hb(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small tree, small model: fast enough for many invocations.
const SMALL: &[&str] = &["--depth", "2", "--branching", "2", "--per-node", "8", "--brain-dim", "12", "--text-dim", "6"];
const TINY_MODEL: &[&str] = &["--hidden", "16", "--dim", "4", "--batch-size", "16", "--lr", "0.001"];

fn generate_small(dir: &Path) -> String {
    let path = dir.join("small.bin");
    let mut args = vec!["generate", "--out", p(&path)];
    args.extend_from_slice(SMALL);
    ok(&args);
    path.to_str().unwrap().to_string()
}

fn train_small(data: &str, out: &Path, epochs: &str) -> String {
    let mut args = vec!["train", "--data", data, "--out-dir", p(out), "--epochs", epochs];
    args.extend_from_slice(TINY_MODEL);
    ok(&args)
}

#[test]
fn generate_counts_samples_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for path in [&a, &b] {
        let out = ok(&["generate", "--out", p(path), "--depth", "3", "--branching", "2", "--per-node", "10"]);
        let v: Value = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(v["samples"], 70);
        assert_eq!(v["nodes"], 7);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(hb(&["generate"]).status.code(), Some(2));
    assert_eq!(hb(&["frobnicate"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = hb(&["generate", "--out", p(&dir.path().join("x.bin")), "--depth", "0", "--noise", "-1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("depth") && err.contains("noise"), "{err}");
}

#[test]
fn bad_config_file_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"lr": -1, "tau": 0, "mystery": 3}"#).unwrap();
    let out = hb(&["train", "--config", p(&cfg), "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for key in ["lr", "tau", "mystery"] {
        assert!(err.contains(key), "missing {key} in {err}");
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = hb(&["train", "--data", p(&missing), "--out-dir", p(dir.path()), "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.bin"));
}

#[test]
fn echoed_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let out = ok(&["train", "--data", &data, "--out-dir", p(dir.path()), "--epochs", "0"]);
    let first: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    let c = &first["config"];
    assert_eq!(c["lambda1"], 0.5);
    assert_eq!(c["lambda2"], 30.0);
    assert_eq!(c["delta"], 5.0);
    assert_eq!(c["p"], 2.0);
    assert_eq!(c["q"], 0.5);
    assert_eq!(c["lr"], 1e-4);
    assert_eq!(c["batch_size"], 4096);
    assert_eq!(c["weight_decay"], 0.05);
    assert_eq!(c["hidden"], 512);
    let written: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(&written, c);
}

#[test]
fn default_epochs_is_two_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    // The config file wins over built-in defaults; flags win over the file.
    fs::write(&cfg, r#"{"epochs": 0, "lambda2": 7.5}"#).unwrap();
    let data = generate_small(dir.path());
    let out = ok(&["train", "--config", p(&cfg), "--data", &data, "--out-dir", p(dir.path()), "--lambda2", "3"]);
    let first: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(first["config"]["epochs"], 0);
    assert_eq!(first["config"]["lambda2"], 3.0);

    let out = hb(&["train", "--data", &data, "--out-dir", p(dir.path()), "--epochs", "-3"]);
    assert_eq!(out.status.code(), Some(2));
    // Without any override the echo carries the built-in 200.
    let head = Command::new(env!("CARGO_BIN_EXE_hyperbrain"))
        .args(["train", "--data", &data, "--out-dir", p(&dir.path().join("d")), "--hidden", "8", "--dim", "2"])
        .output()
        .unwrap();
    let first: Value = serde_json::from_str(String::from_utf8_lossy(&head.stdout).lines().next().unwrap()).unwrap();
    assert_eq!(first["config"]["epochs"], 200);
}

#[test]
fn train_logs_one_record_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let out = train_small(&data, dir.path(), "2");
    let lines: Vec<&str> = out.lines().collect();
    // config echo, two epochs, summary
    assert_eq!(lines.len(), 4);
    for (i, line) in lines[1..3].iter().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"], i + 1);
        for key in ["angle", "centroid", "hierarchy", "total"] {
            assert!(v[key].as_f64().unwrap().is_finite());
        }
    }
    let log = fs::read_to_string(dir.path().join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().collect::<Vec<_>>(), lines[1..3]);
    assert!(dir.path().join("checkpoint.bin").exists());
}

#[test]
fn resume_with_zero_epochs_keeps_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let first = dir.path().join("first");
    train_small(&data, &first, "2");
    let ck = first.join("checkpoint.bin");
    let second = dir.path().join("second");
    let mut args = vec!["train", "--data", &data, "--out-dir", p(&second), "--epochs", "0", "--resume", p(&ck)];
    args.extend_from_slice(TINY_MODEL);
    ok(&args);
    assert_eq!(fs::read(&ck).unwrap(), fs::read(second.join("checkpoint.bin")).unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    let whole = dir.path().join("whole");
    train_small(&data, &whole, "4");
    let half = dir.path().join("half");
    train_small(&data, &half, "2");
    let rest = dir.path().join("rest");
    let ck = half.join("checkpoint.bin");
    let mut args = vec!["train", "--data", &data, "--out-dir", p(&rest), "--epochs", "2", "--resume", p(&ck)];
    args.extend_from_slice(TINY_MODEL);
    ok(&args);
    assert_eq!(
        fs::read(whole.join("checkpoint.bin")).unwrap(),
        fs::read(rest.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_report_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    train_small(&data, dir.path(), "3");
    let ck = dir.path().join("checkpoint.bin");
    let out = ok(&[
        "eval", "--data", &data, "--out-dir", p(dir.path()), "--checkpoint", p(&ck),
        "--ks", "1,5,10", "--export-poincare", "--export-histogram",
    ]);
    let report: Value = serde_json::from_str(&out).unwrap();
    for dir_key in ["text_to_brain", "brain_to_text"] {
        for k in ["1", "5", "10"] {
            let r = report["recall"][dir_key][k]["mean"].as_f64().unwrap();
            assert!((0.0..=100.0).contains(&r));
        }
    }
    assert!(report["tau"]["brain"].is_number());

    let poincare = fs::read_to_string(dir.path().join("poincare.csv")).unwrap();
    let mut lines = poincare.lines();
    assert_eq!(lines.next(), Some("label,x,y"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 24);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let (x, y): (f64, f64) = (f[1].parse().unwrap(), f[2].parse().unwrap());
        assert!(x * x + y * y < 1.0);
    }
    let hist = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("time,region_count"));
    assert_eq!(hist.lines().count(), 25);
}

#[test]
fn cross_validated_eval_with_null() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    train_small(&data, dir.path(), "1");
    let ck = dir.path().join("checkpoint.bin");
    let mut args = vec![
        "eval", "--data", &data, "--out-dir", p(dir.path()), "--checkpoint", p(&ck),
        "--folds", "4", "--with-null", "--epochs", "2",
    ];
    args.extend_from_slice(TINY_MODEL);
    let report: Value = serde_json::from_str(&ok(&args)).unwrap();
    for key in ["text_to_brain", "brain_to_text", "null_text_to_brain", "null_brain_to_text"] {
        let per_fold = report["recall"][key]["5"]["per_fold"].as_array().unwrap();
        assert_eq!(per_fold.len(), 4);
        assert!(report["recall"][key].get("100").is_none());
    }
    let notes = report["diagnostics"]["notes"].to_string();
    assert!(notes.contains("recall@100 skipped"), "{notes}");
}

#[test]
fn embed_writes_points_on_the_hyperboloid() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    train_small(&data, dir.path(), "1");
    let ck = dir.path().join("checkpoint.bin");
    ok(&["embed", "--data", &data, "--out-dir", p(dir.path()), "--checkpoint", p(&ck)]);
    for name in ["brain_embeddings.csv", "text_embeddings.csv"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("time,s0,s1,s2,s3"));
        let mut rows = 0;
        for line in lines {
            let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
            // Default curvature 2: -t^2 + |s|^2 = -1/2.
            let inner = -v[0] * v[0] + v[1..].iter().map(|x| x * x).sum::<f64>();
            assert!((inner + 0.5).abs() <= 1e-9 * v[0] * v[0], "{inner}");
            rows += 1;
        }
        assert_eq!(rows, 24);
    }
}

#[test]
fn checkpoint_and_dataset_dims_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_small(dir.path());
    train_small(&data, dir.path(), "1");
    let other = dir.path().join("other.bin");
    ok(&["generate", "--out", p(&other), "--depth", "1", "--branching", "2", "--per-node", "3", "--brain-dim", "20", "--text-dim", "6"]);
    let out = hb(&[
        "eval", "--data", p(&other), "--out-dir", p(dir.path()),
        "--checkpoint", p(&dir.path().join("checkpoint.bin")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("20") && err.contains("12"), "{err}");
}

#[test]
fn jsonl_input_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let mut body = String::new();
    for i in 0..6 {
        let v = i as f64;
        body.push_str(&format!(
            "{{\"brain\": [{v}, 6.0, 0.5], \"text\": [{}, 1.0]}}\n",
            v * 0.1
        ));
    }
    fs::write(&path, body).unwrap();
    let out = ok(&[
        "train", "--data", p(&path), "--out-dir", p(dir.path()), "--epochs", "1",
        "--hidden", "8", "--dim", "2",
    ]);
    assert!(out.contains("\"epochs_completed\":1"));
}

#[test]
fn shipped_benchmark_config_matches_the_preset() {
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/benchmark.json");
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["train", "--config", cfg, "--out-dir", p(dir.path()), "--epochs", "0"]);
    let first: Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    let c = &first["config"];

    let preset = hyperbrain::presets::synthetic_benchmark(0);
    let d = preset.data;
    assert_eq!(c["depth"], d.tree_depth);
    assert_eq!(c["branching"], d.branching);
    assert_eq!(c["per_node"], d.samples_per_node);
    assert_eq!(c["noise"], d.noise_sigma);
    assert_eq!(c["brain_dim"], d.brain_dim);
    assert_eq!(c["text_dim"], d.text_dim);
    assert_eq!(c["delta"], d.delta);
    assert_eq!(c["seed"], d.seed);
    assert_eq!(c["hidden"], preset.brain.hidden_dim);
    assert_eq!(c["dim"], preset.brain.output_dim);
    assert_eq!(c["brain_depth"], preset.brain.depth);
    assert_eq!(c["text_depth"], preset.text.depth);
    assert_eq!(c["batch_size"], preset.train.batch_size);
    assert_eq!(c["lr"], preset.train.lr);
    assert_eq!(c["lambda2"], preset.train.loss.lambda2);
    assert_eq!(c["curvature"], preset.train.loss.curvature.value());

    // Same initial weights as the library preset.
    let ck = hyperbrain::Checkpoint::load(dir.path().join("checkpoint.bin")).unwrap();
    let init = hyperbrain::DualEncoder::init(preset.brain, preset.text, preset.train.loss.curvature).unwrap();
    assert_eq!(ck.model, init);
}
