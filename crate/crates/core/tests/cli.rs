//! End-to-end runs of the `kgs` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn kgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("KGS_THREADS")
        .output()
        .expect("spawn kgs")
}

fn ok(args: &[&str]) -> Output {
    let out = kgs(args);
    assert!(
        out.status.success(),
        "kgs {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn synth(dir: &Path, preset: &str) -> PathBuf {
    let data = dir.join(preset);
    ok(&["synth", "--preset", preset, "--out", s(&data)]);
    data
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--preset", "single", "--seed", "4", "--out", s(&a), "--threads", "1"]);
    ok(&["synth", "--preset", "single", "--seed", "4", "--out", s(&b), "--threads", "3"]);
    for f in ["scene.json", "cameras.json", "frames/00003_blur.ppm", "frames/00003_sharp.ppm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn malformed_config_exits_with_config_code_and_location() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "single");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"seed\": 3,\n  \"train.iterations\" 10\n}\n").unwrap();
    let out = kgs(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("column"), "{err}");

    std::fs::write(&bad, "{\"train.iteration\": 10}").unwrap();
    let out = kgs(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.iteration"));
}

#[test]
fn malformed_scene_spec_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, "{\"name\": \"x\",\n \"frames\": }").unwrap();
    let out = kgs(&["synth", "--spec", s(&spec), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("column"), "{err}");
}

#[test]
fn missing_dataset_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = kgs(&["train", "--data", s(&dir.path().join("nowhere")), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_subcommand_flag_exits_with_config_code() {
    let out = kgs(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reports_every_held_out_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "decomp");
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--iterations", "3"]);
    for f in ["config.json", "train_log.csv", "timing.csv", "checkpoint_final"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(read_csv(&run.join("train_log.csv")).len(), 3);
    let eval = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("checkpoint_final")), "--data", s(&data), "--out", s(&eval)]);
    let rows = read_csv(&eval.join("metrics.csv"));
    let frames: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(frames, vec![0, 8, 16, 24, 32, 40]);
    for r in &rows {
        let psnr: f64 = r[1].parse().unwrap();
        let ssim: f64 = r[2].parse().unwrap();
        assert!(psnr.is_finite() && (-1.0..=1.0).contains(&ssim));
    }
    assert!(eval.join("partition.txt").exists());
}

#[test]
fn oracle_reconstruction_of_a_static_scene_is_near_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "static-lite");
    let out = dir.path().join("oracle");
    ok(&["eval", "--oracle", "--data", s(&data), "--out", s(&out)]);
    let rows = read_csv(&out.join("metrics.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        let psnr: f64 = r[1].parse().unwrap();
        assert!(psnr >= 40.0, "frame {} PSNR {psnr}", r[0]);
    }
}

#[test]
fn oracle_refuses_moving_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "single");
    let out = kgs(&["eval", "--oracle", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_switch_is_recorded_in_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "single");
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--iterations", "2", "--ablate", "no-kr"]);
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["render.refine"], Value::Bool(false));
    assert_eq!(cfg["render.coarse_fine"], Value::Bool(true));

    let out = kgs(&["train", "--data", s(&data), "--out", s(&run), "--ablate", "no-such-variant"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "single");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\"train.checkpoint_every\": 4}").unwrap();
    let straight = dir.path().join("straight");
    let split = dir.path().join("split");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight), "--iterations", "8"]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split), "--iterations", "8"]);
    let half = split.join("checkpoint_000004");
    assert!(half.exists());

    // Rewind the split run to its mid-run checkpoint and continue from there.
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    let log = std::fs::read_to_string(split.join("train_log.csv")).unwrap();
    let first: String = log.lines().take(5).map(|l| format!("{l}\n")).collect();
    std::fs::write(resumed.join("train_log.csv"), first).unwrap();
    ok(&["train", "--resume", s(&half), "--data", s(&data), "--out", s(&resumed)]);

    assert_eq!(
        std::fs::read_to_string(straight.join("train_log.csv")).unwrap(),
        std::fs::read_to_string(resumed.join("train_log.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(straight.join("checkpoint_final")).unwrap(),
        std::fs::read(resumed.join("checkpoint_final")).unwrap()
    );
}
