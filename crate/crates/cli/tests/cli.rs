use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_mgalign");

fn mgalign(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("MGALIGN_OUTPUT_ROOT", root)
        .output()
        .expect("spawn mgalign")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout_json(o: &Output) -> Value {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Generated tiny dataset plus a completed two-epoch run.
fn trained(root: &Path) -> PathBuf {
    stdout_json(&mgalign(root, &["generate", "--preset", "tiny"]));
    stdout_json(&mgalign(root, &["train", "--preset", "tiny", "--epochs", "2"]));
    root.join("runs/tiny")
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_twice_gives_identical_digest() {
    let dir = TempDir::new().unwrap();
    let other = dir.path().join("a");
    let a = stdout_json(&mgalign(dir.path(), &["generate", "--preset", "tiny", "--out", other.to_str().unwrap()]));
    let b = stdout_json(&mgalign(dir.path(), &["generate", "--preset", "tiny"]));
    assert_eq!(a["digest"], b["digest"]);
    assert_eq!(a["digest"].as_str().unwrap().len(), 64);
}

#[test]
fn output_root_comes_from_env() {
    let dir = TempDir::new().unwrap();
    stdout_json(&mgalign(dir.path(), &["generate", "--preset", "tiny"]));
    assert!(dir.path().join("dataset/manifest.json").exists());
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "preset = \"tiny\"\n[train]\nepoches = 3\n").unwrap();
    let o = mgalign(dir.path(), &["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epoches"), "{}", stderr(&o));
    let o = mgalign(dir.path(), &["train", "--preset", "tiny", "--set", "train.epoches=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epoches"));
}

#[test]
fn zero_stage1_fraction_rejected() {
    let dir = TempDir::new().unwrap();
    let o = mgalign(dir.path(), &["train", "--preset", "tiny", "--stage1-fraction", "0.0"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("stage1_fraction"));
}

#[test]
fn unwritable_output_exits_3_without_partial_files() {
    let dir = TempDir::new().unwrap();
    let ro = dir.path().join("ro");
    fs::create_dir(&ro).unwrap();
    fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
    // Permission bits do not bind root; use a path under a regular file there.
    let target = if fs::write(ro.join("probe"), b"").is_ok() {
        fs::remove_file(ro.join("probe")).unwrap();
        fs::write(ro.join("blocker"), b"").unwrap();
        ro.join("blocker").join("out")
    } else {
        ro.join("out")
    };
    let before = files_under(dir.path());
    let o = mgalign(dir.path(), &["generate", "--preset", "tiny", "--out", target.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(files_under(dir.path()), before);
    fs::set_permissions(&ro, fs::Permissions::from_mode(0o755)).unwrap();
}

#[test]
fn stale_dataset_exits_4() {
    let dir = TempDir::new().unwrap();
    stdout_json(&mgalign(dir.path(), &["generate", "--preset", "tiny"]));
    // Config mismatch.
    let o = mgalign(dir.path(), &["train", "--preset", "tiny", "--set", "dataset.train_size=65"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    // Digest mismatch.
    let o = mgalign(dir.path(), &["train", "--preset", "tiny", "--set", "dataset_digest=\"00\""]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    // Tampered split file.
    let bin = dir.path().join("dataset/train.bin");
    let mut bytes = fs::read(&bin).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    fs::write(&bin, bytes).unwrap();
    let o = mgalign(dir.path(), &["train", "--preset", "tiny"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    // Missing dataset.
    let o = mgalign(&dir.path().join("elsewhere"), &["train", "--preset", "tiny"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn train_writes_metrics_and_best_marker() {
    let dir = TempDir::new().unwrap();
    let run = trained(dir.path());
    let lines: Vec<Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.len() >= 2);
    assert_eq!(lines.iter().filter(|r| r["kind"] == "epoch").count(), 2);
    assert!(run.join("best.ckpt").exists());
    let marker: Value = serde_json::from_slice(&fs::read(run.join("best.json")).unwrap()).unwrap();
    assert!(marker["val_top1"].is_f64());
    let echoed = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(echoed.contains("epochs = 2"));
}

#[test]
fn eval_reproduces_recorded_val_and_keys_splits() {
    let dir = TempDir::new().unwrap();
    let run = trained(dir.path());
    let ckpt = run.join("best.ckpt");
    let marker: Value = serde_json::from_slice(&fs::read(run.join("best.json")).unwrap()).unwrap();
    let val = stdout_json(&mgalign(dir.path(), &["eval", ckpt.to_str().unwrap(), "--split", "val"]));
    assert_eq!(val["val_top1"].as_f64().unwrap().to_bits(), marker["val_top1"].as_f64().unwrap().to_bits());
    assert!(val.get("test_top1").is_none());
    let test = stdout_json(&mgalign(dir.path(), &["eval", ckpt.to_str().unwrap(), "--split", "test"]));
    assert!(test["test_top1"].is_f64());
    assert!(test.get("val_top1").is_none());
    assert_eq!(
        test["test_top1"].as_f64().unwrap().to_bits(),
        marker["test"]["top1"].as_f64().unwrap().to_bits()
    );
}

#[test]
fn corrupted_checkpoint_exits_5_with_offset() {
    let dir = TempDir::new().unwrap();
    let run = trained(dir.path());
    let ckpt = run.join("best.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    for sub in ["eval", "inspect-checkpoint"] {
        let o = mgalign(dir.path(), &[sub, bad.to_str().unwrap()]);
        assert_eq!(code(&o), 5, "{sub}: {}", stderr(&o));
        assert!(stderr(&o).contains("bytes"), "{}", stderr(&o));
    }
    let o = mgalign(dir.path(), &["inspect-checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(stdout_json(&o)["kind"], "model");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    stdout_json(&mgalign(dir.path(), &["generate", "--preset", "tiny"]));
    let full = stdout_json(&mgalign(dir.path(), &["train", "--preset", "tiny", "--epochs", "3", "--run-id", "a"]));
    let part = stdout_json(&mgalign(
        dir.path(),
        &["train", "--preset", "tiny", "--epochs", "3", "--run-id", "b", "--stop-after-epoch", "0"],
    ));
    assert_eq!(part["completed"], false);
    let resumed = stdout_json(&mgalign(
        dir.path(),
        &["train", "--preset", "tiny", "--epochs", "3", "--run-id", "b", "--resume"],
    ));
    assert_eq!(full["best_val_top1"], resumed["best_val_top1"]);
    assert_eq!(full["test"], resumed["test"]);
    // Headers differ in run_id only; tensors must agree exactly.
    let (_, a) = mgalign_core::checkpoint::read(&dir.path().join("runs/a/best.ckpt")).unwrap();
    let (_, b) = mgalign_core::checkpoint::read(&dir.path().join("runs/b/best.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_parallel_matches_serial_and_rejects_empty() {
    let dir = TempDir::new().unwrap();
    let run = |p: &str| {
        let out = dir.path().join(format!("p{p}"));
        mgalign(
            dir.path(),
            &["ablate", "--preset", "tiny", "--epochs", "2", "--parallel", p, "--out", out.to_str().unwrap()],
        )
    };
    let a = run("1");
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = run("2");
    assert_eq!(code(&b), 0);
    assert_eq!(a.stdout, b.stdout);
    let ra = fs::read(dir.path().join("p1/report.json")).unwrap();
    let rb = fs::read(dir.path().join("p2/report.json")).unwrap();
    assert_eq!(ra, rb);

    let o = mgalign(dir.path(), &["ablate", "--preset", "tiny", "--set", "ablation.cells=[]"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn unknown_split_and_preset_exit_2() {
    let dir = TempDir::new().unwrap();
    let o = mgalign(dir.path(), &["generate", "--preset", "huge"]);
    assert_eq!(code(&o), 2);
    let run = trained(dir.path());
    let o = mgalign(dir.path(), &["eval", run.join("best.ckpt").to_str().unwrap(), "--split", "dev"]);
    assert_eq!(code(&o), 2);
}
