use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tokcomm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokcomm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_emits_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shapes");
    let o = tokcomm(&["synth", "--kind", "sphere", "--n", "256", "--count", "32", "--out", p(&out)]);
    stdout(&o);
    let files: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert_eq!(files.len(), 32);
}

#[test]
fn metrics_on_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    stdout(&tokcomm(&["synth", "--kind", "torus", "--n", "64", "--count", "1", "--out", p(&out)]));
    let file = out.join("torus_0000.ply");
    let text = stdout(&tokcomm(&["metrics", p(&file), p(&file)]));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("d1").parse::<f64>().unwrap(), 0.0);
    assert_eq!(col("cd").parse::<f64>().unwrap(), 0.0);
    assert_eq!(col("d1_psnr"), "inf");
}

#[test]
fn bad_arguments_fail_with_usage() {
    let o = tokcomm(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = tokcomm(&["metrics", "only-one.ply"]);
    assert!(!o.status.success());
    let o = tokcomm(&["train", "--set", "no_such_key=1", "--quiet"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = tokcomm(&["synth", "--kind", "teapot", "--count", "1"]);
    assert!(!o.status.success());
}

#[test]
fn train_eval_stats_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = tokcomm(&[
        "train",
        "--set",
        "epochs=1",
        "--set",
        "dataset_size=10",
        "--set",
        "eval_snrs=[5.0]",
        "--out",
        p(&run),
        "--quiet",
    ]);
    stdout(&o);
    for f in ["model.ckpt", "model.ckpt.json", "run.json", "config.toml", "metrics.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["epochs"].as_array().unwrap().len(), 1);

    let ckpt = run.join("model.ckpt");
    let csv = stdout(&tokcomm(&["eval", "--checkpoint", p(&ckpt), "--snr", "0,5,10,15", "--trials", "1"]));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("model,snr_db"));
    let snrs: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(snrs, [0.0, 5.0, 10.0, 15.0]);

    let json = stdout(&tokcomm(&["stats", "--checkpoint", p(&ckpt), "--snr", "10"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let total: f64 = v["grid"].as_array().unwrap().iter().map(|r| r["probability"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(v["entropy_bits"].as_f64().unwrap() <= 4.0 + 1e-12);
}
