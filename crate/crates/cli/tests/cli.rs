use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn osc_qat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osc-qat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

const TINY: &str = r#"{
    "seed": 3,
    "model": "toy_dwnet",
    "dataset": {"source": "synthetic", "classes": 3, "height": 8, "width": 8,
                "train_samples": 96, "eval_samples": 32, "noise": 0.05},
    "optimizer": {"pretrain_epochs": 1, "epochs": 30, "batch_size": 16, "lr": 0.01},
    "bn_reestimate_batches": 3,
    "post": {"loss_samples": 8, "proposals_per_weight": 2}
}"#;

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&osc_qat(&[])), 1);
    assert_eq!(code(&osc_qat(&["train"])), 1);
    assert_eq!(code(&osc_qat(&["--help"])), 0);
    assert_eq!(code(&osc_qat(&["train", "--config", "/nonexistent/config.json"])), 1);
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing_seed = write_config(dir.path(), r#"{"model": "toy_dwnet"}"#);
    assert_eq!(
        code(&osc_qat(&["train", "--config", missing_seed.to_str().unwrap()])),
        1
    );
    let bad_toy = write_config(
        dir.path(),
        r#"{"seed": 1, "toy": {"estimator": {"kind": "ewgs", "delta": 5.0}}}"#,
    );
    let out = dir.path().join("toy");
    let status = osc_qat(&[
        "toy",
        "--config",
        bad_toy.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&status), 1);
    assert!(!out.join("trajectory_ste.csv").exists());
}

#[test]
fn toy_experiments_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 1}"#);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let run = osc_qat(&["toy", "--config", cfg, "--out", out_s]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for name in ["ste", "ewgs", "psg", "dsq"] {
        let csv = std::fs::read_to_string(out.join(format!("trajectory_{name}.csv"))).unwrap();
        assert_eq!(csv.lines().next(), Some("step,latent_w,w_int,f_ema"));
    }

    let run = osc_qat(&["toy", "--config", cfg, "--out", out_s, "--sweep", "frequency"]);
    assert_eq!(code(&run), 0);
    let summary: Value = serde_json::from_slice(&run.stdout).unwrap();
    let slope = summary["slope"].as_f64().unwrap();
    assert!((0.9..=1.1).contains(&slope), "{summary}");
    assert!(out.join("frequency_sweep.csv").exists());

    let run = osc_qat(&["toy", "--config", cfg, "--out", out_s, "--sweep", "lr"]);
    assert_eq!(code(&run), 0);
    let csv = std::fs::read_to_string(out.join("lr_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    // strong dampening parks the weight inside one bin
    let run = osc_qat(&[
        "toy",
        "--config",
        cfg,
        "--out",
        out_s,
        "--estimator",
        "ste",
        "--dampen",
        "1.0",
    ]);
    assert_eq!(code(&run), 0);
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let ints: Vec<i64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let tail = &ints[ints.len() / 2..];
    assert!(tail.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn train_and_post_training_tools() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let run = osc_qat(&["train", "--config", cfg, "--out", out_s]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary["seed"], 3);
    for f in ["config.json", "metrics.jsonl", "checkpoint.oqat", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (0..steps.len() as u64).collect::<Vec<_>>());

    let run = osc_qat(&["reestimate-bn", "--config", cfg, "--out", out_s]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = read_json(&out.join("reestimate_report.json"));
    for layer in report["layers"].as_array().unwrap() {
        assert!(layer["after"]["max"].as_f64().unwrap().abs() <= 1e-9);
    }
    assert!(out.join("reestimated.oqat").exists());

    let run = osc_qat(&["sample", "--config", cfg, "--out", out_s, "--trials", "4"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let sample = read_json(&out.join("sample_report.json"));
    assert_eq!(sample["losses"].as_array().unwrap().len(), 4);

    let run = osc_qat(&["anneal", "--config", cfg, "--out", out_s]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let anneal = read_json(&out.join("anneal_report.json"));
    assert!(anneal["loss"].as_f64().unwrap() <= anneal["checkpoint_loss"].as_f64().unwrap());
    assert!(out.join("annealed.oqat").exists());

    let run = osc_qat(&["analyze", "--config", cfg, "--out", out_s]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let analysis = read_json(&out.join("analysis.json"));
    assert_eq!(analysis["log"]["contiguous"], true);
    assert_eq!(analysis["log"]["matches_checkpoint"], true);

    let missing = dir.path().join("nope.oqat");
    let run = osc_qat(&[
        "sample",
        "--config",
        cfg,
        "--out",
        out_s,
        "--checkpoint",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 2);
}

fn idx_images(n: u32, rows: u32, cols: u32, magic: u32) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [magic, n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend((0..n * rows * cols).map(|i| (i * 37 % 256) as u8));
    b
}

fn idx_labels(n: u32) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(&0x801u32.to_be_bytes());
    b.extend_from_slice(&n.to_be_bytes());
    b.extend((0..n).map(|i| (i % 2) as u8));
    b
}

#[test]
fn idx_datasets_train_and_reject_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("imgs.idx"), idx_images(40, 8, 8, 0x803)).unwrap();
    std::fs::write(dir.path().join("labels.idx"), idx_labels(40)).unwrap();
    std::fs::write(dir.path().join("bad.idx"), idx_images(40, 8, 8, 0x999)).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"seed": 2,
            "dataset": {"source": "idx", "train_images": "imgs.idx", "train_labels": "labels.idx", "eval_fraction": 0.2},
            "optimizer": {"pretrain_epochs": 1, "epochs": 1, "batch_size": 8},
            "bn_reestimate_batches": 2}"#,
    );
    let out = dir.path().join("run");
    let run = osc_qat(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let bad = write_config(
        dir.path(),
        r#"{"seed": 2, "dataset": {"source": "idx", "train_images": "bad.idx", "train_labels": "labels.idx"}}"#,
    );
    let run = osc_qat(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("offset 0"));
}
