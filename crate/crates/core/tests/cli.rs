use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_rml-lab");

fn blobs_config(noise: &str, mode: &str, extra: &str) -> String {
    format!(
        r#"
[dataset]
kind = "blobs"
classes = 3
per_class = 60
dim = 4
separation = 10.0

{noise}

[run]
mode = "{mode}"
total_epochs = 15
batch_size = 16
warmup_epochs = 2
{extra}

[run.regroup]
n = 2
k = 4

[model]
kind = "linear"

[optimizer]
lr_init = 0.05
"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn rml_lab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> serde_json::Value {
    let out = rml_lab(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn inject_rate_zero_and_rerun_identical() {
    let dir = TempDir::new().unwrap();
    let noise = "[noise]\nkind = \"symmetric\"\nrate = 0.0";
    let cfg = write_config(dir.path(), "c.toml", &blobs_config(noise, "ce", ""));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = run_ok(&["inject", "--config", path(&cfg), "--out", path(&a)]);
    assert_eq!(summary["corrupted_fraction"], 0.0);
    run_ok(&["inject", "--config", path(&cfg), "--out", path(&b)]);
    let mask = fs::read_to_string(a.join("mask.csv")).unwrap();
    assert!(mask.lines().skip(1).all(|l| l.ends_with(",false")));
    for f in ["train.rmld", "test.rmld", "mask.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn inject_pairflip_rate() {
    let dir = TempDir::new().unwrap();
    let text = r#"
[dataset]
kind = "blobs"
classes = 10
per_class = 12500
dim = 1
separation = 1.0

[noise]
kind = "pairflip"
rate = 0.45

[run]
mode = "ce"
total_epochs = 1
batch_size = 1

[model]
kind = "linear"

[optimizer]
lr_init = 0.1
"#;
    let cfg = write_config(dir.path(), "c.toml", text);
    let out = dir.path().join("o");
    let summary = run_ok(&["inject", "--config", path(&cfg), "--out", path(&out), "--seed", "3"]);
    assert_eq!(summary["train_samples"], 100_000);
    let rate = summary["corrupted_fraction"].as_f64().unwrap();
    assert!((rate - 0.45).abs() <= 0.01, "{rate}");
    let mask = fs::read_to_string(out.join("mask.csv")).unwrap();
    for line in mask.lines().skip(1) {
        let cols: Vec<usize> = line.split(',').take(3).map(|v| v.parse().unwrap()).collect();
        assert!(cols[2] == cols[1] || cols[2] == (cols[1] + 1) % 10);
    }
}

#[test]
fn train_ce_on_clean_blobs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &blobs_config("", "ce", ""));
    let out = dir.path().join("o");
    let summary = run_ok(&["train", "--config", path(&cfg), "--out", path(&out)]);
    assert!(summary["final_test_accuracy"].as_f64().unwrap() >= 0.99);
    for f in ["metrics_ce.csv", "summary_ce.json", "checkpoint_ce_student.rmlc", "train.rmld", "test.rmld"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_field_is_named() {
    let dir = TempDir::new().unwrap();
    let text = blobs_config("", "ce", "").replace("total_epochs = 15\n", "");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = rml_lab(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "format");
    assert!(err["message"].as_str().unwrap().contains("total_epochs"));
}

#[test]
fn unknown_key_rejected() {
    let dir = TempDir::new().unwrap();
    let text = blobs_config("", "ce", "epsilon = 1.0");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let out = rml_lab(&["train", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
}

#[test]
fn modes_share_dataset_artifact() {
    let dir = TempDir::new().unwrap();
    let noise = "[noise]\nkind = \"symmetric\"\nrate = 0.3";
    let out = dir.path().join("o");
    let rml = write_config(dir.path(), "rml.toml", &blobs_config(noise, "rml", ""));
    let ce = write_config(dir.path(), "ce.toml", &blobs_config(noise, "ce", ""));
    run_ok(&["train", "--config", path(&rml), "--out", path(&out), "--seed", "4"]);
    let data = fs::read(out.join("train.rmld")).unwrap();
    run_ok(&["train", "--config", path(&ce), "--out", path(&out), "--seed", "4"]);
    assert_eq!(fs::read(out.join("train.rmld")).unwrap(), data);
    let a = fs::read(out.join("metrics_rml.csv")).unwrap();
    let b = fs::read(out.join("metrics_ce.csv")).unwrap();
    assert_ne!(a, b);
    assert!(out.join("cache_rml.csv").exists());
    assert!(out.join("checkpoint_rml_teacher.rmlc").exists());
}

#[test]
fn train_from_injected_container() {
    let dir = TempDir::new().unwrap();
    let noise = "[noise]\nkind = \"symmetric\"\nrate = 0.2";
    let cfg = write_config(dir.path(), "c.toml", &blobs_config(noise, "ce", ""));
    let data = dir.path().join("data");
    run_ok(&["inject", "--config", path(&cfg), "--out", path(&data)]);
    let text = blobs_config("", "rml", "").replace(
        "kind = \"blobs\"\nclasses = 3\nper_class = 60\ndim = 4\nseparation = 10.0",
        &format!(
            "kind = \"file\"\npath = {:?}\ntest_path = {:?}",
            path(&data.join("train.rmld")),
            path(&data.join("test.rmld"))
        ),
    );
    let cfg = write_config(dir.path(), "f.toml", &text);
    let summary = run_ok(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("o"))]);
    assert!((summary["corrupted_fraction"].as_f64().unwrap() - 0.2).abs() < 0.1);
}

#[test]
fn verify_prop1_passes() {
    let reports = run_ok(&["verify", "--suite", "prop1"]);
    assert_eq!(reports[0]["check"], "prop1");
    assert_eq!(reports[0]["pass"], true);
    assert!(reports[0]["statistic"].as_f64().unwrap() < 1e-9);
}

#[test]
fn verify_vacuous_prop2_exits_zero() {
    let dir = TempDir::new().unwrap();
    let text = r#"
[[prop2]]
n = 2
k = 1
epsilon_r = 0.1
trials = 200
population = { kind = "normal", mean = 0.0, sd = 1.0 }
"#;
    let cfg = write_config(dir.path(), "v.toml", text);
    let reports = run_ok(&["verify", "--suite", "prop2", "--config", path(&cfg)]);
    assert_eq!(reports[0]["status"], "vacuous");
}

#[test]
fn verify_all_aggregates() {
    let dir = TempDir::new().unwrap();
    let text = r#"
contamination_max_rate = 0.01

[prop1]
trials = 50
m = 20
max_loss = 30.0

[[prop2]]
n = 6
k = 10
epsilon_r = 1.0
trials = 2000
population = { kind = "normal", mean = 1.0, sd = 1.0 }

[contamination]
n = 6
k = 10
epsilon_r = 0.5
trials = 1000
population = { kind = "contaminated", mean = 1.0, sd = 0.1, corrupted = 2, outlier = 1e6 }

[mom]
ns = [2, 4]
ks = [1, 2]
bases = 2

[cor1]
runs = 1
epochs = 5
noise_rate = 0.4
"#;
    let cfg = write_config(dir.path(), "v.toml", text);
    let out = dir.path().join("o");
    let reports = run_ok(&["verify", "--suite", "all", "--config", path(&cfg), "--out", path(&out)]);
    let checks: Vec<&str> = reports.as_array().unwrap().iter().map(|r| r["check"].as_str().unwrap()).collect();
    assert_eq!(checks, ["prop1", "prop2", "mom", "contamination", "cor1"]);
    assert!(reports.as_array().unwrap().iter().all(|r| r["pass"] == true));
    assert!(out.join("verify.json").exists());
}

#[test]
fn unknown_suite_is_an_error() {
    let out = rml_lab(&["verify", "--suite", "prop3"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_input");
}

#[test]
fn ablate_clean_data_and_determinism() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &blobs_config("", "rml", ""));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let rows = run_ok(&["ablate", "--config", path(&cfg), "--out", path(&a), "--seed", "2"]);
    run_ok(&["ablate", "--config", path(&cfg), "--out", path(&b), "--seed", "2"]);
    let r = &rows[0];
    let accs = [&r["full"], &r["without_processing"], &r["without_median"]].map(|v| v.as_f64().unwrap());
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread <= 0.01, "{accs:?}");
    assert_eq!(fs::read(a.join("ablation.csv")).unwrap(), fs::read(b.join("ablation.csv")).unwrap());
}
