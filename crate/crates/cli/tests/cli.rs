use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "\
n = 200
t_max = 40
log_every = 10
batch_size = 8
mu_ratio = 2
samples = 4
hidden = 16
feature_dim = 8
latent_dim = 8
bank_capacity = 32
";

fn npmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npmatch")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(config: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--quiet", "--config", config, "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    npmatch(&args)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = train(dir.path().join("absent.toml").to_str().unwrap(), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.toml"));
    assert!(!out.exists());
}

#[test]
fn bad_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tau_cc = 0.9\n");
    let o = train(&cfg, &dir.path().join("out"), &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau_cc"));

    let cfg = write_config(dir.path(), SMALL);
    let o = train(&cfg, &dir.path().join("out"), &["--set", "lambda_u=-1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_u"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn train_writes_artifacts_and_respects_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}seed = 4\n"));
    let base = dir.path().join("base");
    let o = train(&cfg, &base, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(base.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("iteration,lr,loss_total"));
    assert_eq!(lines.len(), 1 + 4);
    let report = read_json(&base.join("report.json"));
    assert_eq!(report["seed"], 4);
    assert_eq!(report["iterations"], 40);
    assert!(base.join("checkpoint.json").exists());

    // Flags beat --set, which beats the file.
    let other = dir.path().join("other");
    let o = train(&cfg, &other, &["--set", "seed=5", "--seed", "6", "--set", "t_max=30"]);
    assert!(o.status.success());
    let r2 = read_json(&other.join("report.json"));
    assert_eq!(r2["seed"], 6);
    assert_eq!(r2["iterations"], 30);

    // A seed override changes nothing else in the resolved configuration.
    let seeded = dir.path().join("seeded");
    assert!(train(&cfg, &seeded, &["--seed", "9"]).status.success());
    let r3 = read_json(&seeded.join("report.json"));
    let (a, b) = (report["config"].as_object().unwrap(), r3["config"].as_object().unwrap());
    let changed: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    assert_eq!(changed, ["out_dir", "seed"]);
    assert_eq!(r3["seed"], 9);
}

#[test]
fn eval_reproduces_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    assert!(train(&cfg, &out, &[]).status.success());
    let ck = out.join("checkpoint.json");
    let args = ["eval", "--checkpoint", ck.to_str().unwrap(), "--config", &cfg];
    let a = npmatch(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = npmatch(&args);
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    let recorded = read_json(&out.join("report.json"))["test_accuracy"].as_f64().unwrap();
    assert!(v["accuracy"].as_f64().unwrap() >= recorded - 0.005);

    let text = fs::read_to_string(&ck).unwrap();
    fs::write(&ck, &text[..text.len() / 3]).unwrap();
    let c = npmatch(&args);
    assert_eq!(c.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&c.stderr).contains("checkpoint"));
}

#[test]
fn grad_check_is_deterministic_and_passes() {
    let a = npmatch(&["grad-check", "--seed", "11"]);
    let b = npmatch(&["grad-check", "--seed", "11"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(v["worst_rel_error"].as_f64().unwrap() < 1e-4);
    assert_eq!(v["suites"].as_array().unwrap().len(), 4);
}

#[test]
fn divergence_check_exit_codes() {
    let o = npmatch(&["check-divergence", "--trials", "0"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 of 0"));

    let o = npmatch(&["check-divergence", "--trials", "3", "--samples", "200000"]);
    assert!(o.status.success());

    let o = npmatch(&["check-divergence", "--trials", "3", "--samples", "200000", "--inject-error"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn default_run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("default");
    let o = npmatch(&["train", "--quiet", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "report.json", "checkpoint.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["iterations"], 5000);
    let rows = fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 10);
}

#[test]
fn dataset_export() {
    let o = npmatch(&["dataset", "--set", "n=50", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "x1,x2,label,split");
    assert_eq!(lines.len(), 51);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",labeled")).count(), 6);
}
