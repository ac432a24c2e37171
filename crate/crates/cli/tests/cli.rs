use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn egoev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egoev")).args(args).output().expect("spawn egoev")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// A 16x16 corpus with three sequences per class and a fast run config.
fn small_corpus(dir: &TempDir) -> (PathBuf, PathBuf) {
    let synth_cfg = path(dir, "synth.json");
    fs::write(&synth_cfg, r#"{"width": 16, "height": 16, "duration_us": 200000, "per_class": 3}"#).unwrap();
    let data = path(dir, "corpus");
    let o = egoev(&["synth", "--config", s(&synth_cfg), "--out-dir", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run_cfg = path(dir, "run.json");
    fs::write(
        &run_cfg,
        r#"{"model": {"widths": [4, 8], "state": 4},
            "train": {"lr": 0.01, "epochs": 100, "patience": 100, "batch_size": 5},
            "window": {"bin_len": 200000, "frames_per_bin": 6}}"#,
    )
    .unwrap();
    (data, run_cfg)
}

#[test]
fn convert_400ms_stream_gives_two_bins() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "events.csv");
    fs::write(&csv, "t_us,x,y,p\n0,1,2,1\n150000,3,3,0\n250000,0,0,1\n399999,7,4,1\n").unwrap();
    let out = path(&dir, "volume.lnes");
    let o = egoev(&["convert", "--in", s(&csv), "--out", s(&out), "--width", "8", "--height", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = fs::read(&out).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    let header: Value = serde_json::from_slice(&bytes[..nl]).unwrap();
    assert_eq!(header["shape"], serde_json::json!([2, 6, 2, 5, 8]));
    assert_eq!(bytes.len() - nl - 1, 2 * 6 * 2 * 5 * 8 * 4);
}

#[test]
fn convert_reads_binary_input_without_geometry_flags() {
    let dir = TempDir::new().unwrap();
    let evg = path(&dir, "events.evg");
    let mut bytes = b"EVG1".to_vec();
    bytes.extend_from_slice(&4u16.to_le_bytes());
    bytes.extend_from_slice(&4u16.to_le_bytes());
    bytes.extend_from_slice(&10u64.to_le_bytes());
    bytes.extend_from_slice(&[1, 0, 2, 0, 1, 0, 0, 0]);
    fs::write(&evg, bytes).unwrap();
    let out = path(&dir, "v.lnes");
    let o = egoev(&["convert", "--in", s(&evg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_1() {
    let o = egoev(&["convert", "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "e.csv");
    fs::write(&csv, "t_us,x,y,p\n0,0,0,1\n").unwrap();
    let o = egoev(&["convert", "--in", s(&csv), "--out", s(&path(&dir, "v"))]);
    assert_eq!(code(&o), 1, "CSV without geometry");
}

#[test]
fn data_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let o = egoev(&["convert", "--in", s(&path(&dir, "missing.evg")), "--out", s(&path(&dir, "v"))]);
    assert_eq!(code(&o), 2);
    let csv = path(&dir, "unsorted.csv");
    fs::write(&csv, "t_us,x,y,p\n2000,0,0,1\n1000,0,0,1\n").unwrap();
    let o = egoev(&["convert", "--in", s(&csv), "--out", s(&path(&dir, "v")), "--width", "4", "--height", "4"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_stats_pipeline() {
    let dir = TempDir::new().unwrap();
    let (data, run_cfg) = small_corpus(&dir);

    let mut checkpoints = Vec::new();
    for name in ["a.ckpt", "b.ckpt"] {
        let ckpt = path(&dir, name);
        let o = egoev(&[
            "--threads", "1", "train", "--data", s(&data), "--config", s(&run_cfg), "--out", s(&ckpt), "--seed", "3",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        checkpoints.push(ckpt);
    }
    assert_eq!(fs::read(&checkpoints[0]).unwrap(), fs::read(&checkpoints[1]).unwrap());
    let log = |p: &Path| fs::read(format!("{}.log.jsonl", p.display())).unwrap();
    assert_eq!(log(&checkpoints[0]), log(&checkpoints[1]));

    let report = path(&dir, "eval.json");
    let o = egoev(&[
        "eval", "--data", s(&data), "--ckpt", s(&checkpoints[0]), "--report", s(&report), "--split", "train",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&report);
    assert_eq!(r["split"], "train");
    assert_eq!(r["samples"], 5);
    assert_eq!(r["accuracy"], 1.0, "{r}");
    let confusion = r["confusion"]["counts"].as_array().unwrap();
    assert_eq!(confusion.len(), 5);

    let stats = path(&dir, "stats.json");
    let o = egoev(&["stats", "--data", s(&data), "--group-by", "class", "--report", s(&stats)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&stats);
    assert_eq!(r["rates"]["groups"].as_array().unwrap().len(), 5);
    assert!(r["rates"]["handedness"]["bimanual_mean"].as_f64().unwrap() > 0.0);
    assert!(stats.with_extension("rates.csv").exists());
    assert!(stats.with_extension("durations.csv").exists());

    let o = egoev(&["stats", "--data", s(&data), "--group-by", "planet", "--report", s(&stats)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn ablate_writes_four_variants() {
    let dir = TempDir::new().unwrap();
    let (data, run_cfg) = small_corpus(&dir);
    let report = path(&dir, "ablation.json");
    let o = egoev(&[
        "ablate", "--data", s(&data), "--config", s(&run_cfg), "--report", s(&report), "--seeds", "0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(&report);
    let rows = r["variants"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|v| v["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["baseline", "+btsm", "+ssm", "full"]);
    let params: Vec<u64> = rows.iter().map(|v| v["params"].as_u64().unwrap()).collect();
    assert_eq!(params[0], params[1]);
    assert_eq!(params[2], params[3]);
    assert!(params[3] > params[0]);
}
