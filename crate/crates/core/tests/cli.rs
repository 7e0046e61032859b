use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_innerthoughts"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).env_remove("INNERTHOUGHTS_OUT").args(args).output().unwrap()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small planted dataset at `dir/data.ithd`.
fn synth(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("synth");
    let o = run_in(
        dir,
        &[
            "synth", "--out", out.to_str().unwrap(), "--layers", "4", "--dim", "8", "--classes", "3",
            "--n", &n.to_string(), "--signal-layer", "2", "--seed", "5",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let file = dir.join("data.ithd");
    std::fs::rename(out.join("synthetic.ithd"), &file).unwrap();
    file
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["split", "x.ithd", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run_in(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_reports_truncation_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), 40);
    let o = run_in(dir.path(), &["validate", file.to_str().unwrap(), "--out", "v"]);
    assert_eq!(o.status.code(), Some(0));
    let bytes = std::fs::read(&file).unwrap();
    std::fs::write(&file, &bytes[..bytes.len() - 7]).unwrap();
    let o = run_in(dir.path(), &["validate", file.to_str().unwrap(), "--out", "v"]);
    assert_eq!(o.status.code(), Some(1));
    let report = read_json(dir.path().join("v/validation.json"));
    assert_eq!(report["status"], "corrupt");
}

#[test]
fn missing_input_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["split", "absent.ithd", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn out_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), 40);
    let f = file.to_str().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"out": "from_config", "seed": 3}"#).unwrap();
    let c = cfg.to_str().unwrap();

    assert!(run_in(dir.path(), &["split", f]).status.success());
    assert!(dir.path().join("innerthoughts-out/split.json").exists());

    let o = bin()
        .current_dir(dir.path())
        .env("INNERTHOUGHTS_OUT", "from_env")
        .args(["split", f])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from_env/split.json").exists());

    let o = bin()
        .current_dir(dir.path())
        .env("INNERTHOUGHTS_OUT", "from_env")
        .args(["split", f, "--config", c])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read_json(dir.path().join("from_config/split.json"))["seed"], 3);

    assert!(run_in(dir.path(), &["split", f, "--config", c, "--out", "from_flag", "--seed", "9"]).status.success());
    assert_eq!(read_json(dir.path().join("from_flag/split.json"))["seed"], 9);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), 40);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    let o = run_in(dir.path(), &["split", file.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn train_defaults_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), 120);
    let o = run_in(dir.path(), &["train", file.to_str().unwrap(), "--out", "t"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = dir.path().join("t");
    for name in ["checkpoint.ckpt", "history.csv", "metrics.json", "split.json", "run.json"] {
        assert!(t.join(name).exists(), "{name}");
    }
    let run = read_json(t.join("run.json"));
    assert_eq!(run["command"], "train");
    let p = &run["config"]["predictor"];
    assert_eq!(p["architecture"], "mixer");
    assert_eq!(p["n1"], 32);
    assert_eq!(p["n2"], 8);
    let tc = &run["config"]["train"];
    assert_eq!(tc["learning_rate"].as_f64(), Some(1e-5));
    assert_eq!(tc["epochs"], 50);
    assert_eq!(tc["batch_size"], 256);
    assert_eq!(tc["patience"], 5);
    let hash = run["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(hash, innerthoughts::cli::git_blob_sha256(&file).unwrap());

    let split = read_json(t.join("split.json"));
    let sizes: Vec<usize> = ["train", "validation", "test"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .collect();
    assert_eq!(sizes, vec![84, 18, 18]);

    let ck = t.join("checkpoint.ckpt");
    let o = run_in(
        dir.path(),
        &["eval", file.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--split", t.join("split.json").to_str().unwrap(), "--part", "test", "--out", "e"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval = read_json(dir.path().join("e/eval.json"));
    let metrics = read_json(t.join("metrics.json"));
    assert_eq!(eval["accuracy"], metrics["test_accuracy"]);
}

#[test]
fn compare_emits_every_standard_method() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), 150);
    let o = run_in(
        dir.path(),
        &["compare", file.to_str().unwrap(), "--out", "c", "--epochs", "3", "--n-boot", "100", "--pca-components", "4"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("c/report.csv")).unwrap();
    let methods: Vec<String> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(methods.len(), 9, "{csv}");
    assert_eq!(methods[0], "Direct");
    for name in ["InnerThoughts", "Calibrate before use", "Neural net on last 10"] {
        assert!(methods.iter().any(|m| m == name), "{name} missing from {methods:?}");
    }
    let results = read_json(dir.path().join("c/results.json"));
    let direct = &results["results"][0];
    assert!(direct["p_value"].is_null());

    let o = run_in(dir.path(), &["report", "c", "--out", "r"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(dir.path().join("r/report.csv")).unwrap(), csv);

    let o = run_in(
        dir.path(),
        &["compare", file.to_str().unwrap(), "--out", "x", "--methods", "diff_innerthoughts,self_attention", "--epochs", "2", "--n-boot", "100"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("x/report.csv")).unwrap();
    let methods: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, vec!["Direct", "DiffInnerThoughts", "Self-attention"]);
}

#[test]
fn analyze_writes_requested_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let file = synth(dir.path(), 60);
    let f = file.to_str().unwrap();
    assert!(run_in(dir.path(), &["train", f, "--out", "t", "--epochs", "1"]).status.success());
    let o = run_in(
        dir.path(),
        &["analyze", f, "--out", "a", "--margins", "--lens", "--brier", "--influence", "t/checkpoint.ckpt"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = dir.path().join("a");
    for name in ["margins.csv", "margin_histogram.csv", "lens.csv", "influence.csv", "analysis.json", "run.json"] {
        assert!(a.join(name).exists(), "{name}");
    }
    let lens = std::fs::read_to_string(a.join("lens.csv")).unwrap();
    assert_eq!(lens.lines().count(), 1 + 4);
    let margins = std::fs::read_to_string(a.join("margins.csv")).unwrap();
    assert_eq!(margins.lines().count(), 1 + 60);
}
