//! End-to-end runs of the `eph` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
profile = reduced
env.num_objects = 6
env.train_objects = 4
model.encoder_hidden = 8
model.features = 8
model.hidden = 8
train.episodes = 40
train.test_episodes = 20
train.r_star_window = 10
analysis.ablation_episodes = 10
analysis.cosine_episodes = 5
analysis.convergence_stride = 5
";

fn eph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("cfg{}.txt", extra.len()));
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn train(cfg: &Path, seed: u64, out: &Path) {
    let o = eph(&["train", "--config", cfg.to_str().unwrap(), "--seed", &seed.to_string(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn train_is_deterministic_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(&cfg, 3, &a);
    train(&cfg, 3, &b);
    let fa = read_dir_bytes(&a);
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for f in ["checkpoint.bin", "checkpoint.json", "config.txt", "gates.bin", "gates.json", "memory.bin", "memory.json", "run.json", "train_log.csv"] {
        assert!(names.contains(&f), "missing {f}");
    }
    assert_eq!(fa, read_dir_bytes(&b));
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 40 * 6);
    assert!(log.starts_with("episode,trial,reward,steps_to_fixation,task_id,exposure_count"));

    // retraining into an existing directory reproduces it
    train(&cfg, 3, &a);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn invalid_config_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.gamma = 2.0\n");
    let out = tmp.path().join("run");
    let o = eph(&["train", "--config", cfg.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.exists());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);

    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "no.such.key = 1\n").unwrap();
    let o = eph(&["train", "--config", bad.to_str().unwrap(), "--seed", "0", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no.such.key"));
}

#[test]
fn environment_overrides_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_eph"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", out.to_str().unwrap()])
        .env("EPH_TRAIN_EPISODES", "12")
        .env("EPH_TRAIN_R_STAR_WINDOW", "5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(text.contains("train.episodes = 12\n"));
    assert_eq!(fs::read_to_string(out.join("train_log.csv")).unwrap().lines().count(), 1 + 12 * 6);
}

#[test]
fn eval_uses_test_objects_and_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let run = tmp.path().join("run");
    train(&cfg, 5, &run);
    let o = eph(&["eval", "--run", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("eval_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 20 * 6);
    for line in log.lines().skip(1) {
        let task_id: u32 = line.split(',').nth(4).unwrap().parse().unwrap();
        let (a, b) = (task_id / 6, task_id % 6);
        assert!(a >= 4 && b >= 4 && a != b, "task {task_id} uses a train object");
    }

    let o = eph(&["eval", "--run", run.to_str().unwrap(), "--episodes", "7", "--mask", "episodic:0.0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("dropped neurons 8"), "{stdout}");
    let masked = fs::read_to_string(run.join("eval_log_episodic_0.csv")).unwrap();
    assert_eq!(masked.lines().count(), 1 + 7 * 6);

    let o = eph(&["eval", "--run", run.to_str().unwrap(), "--mask", "sideways:0.5"]);
    assert!(!o.status.success());
    let o = eph(&["eval", "--run", tmp.path().join("missing").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn analyze_single_and_multiple_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let root = tmp.path().join("runs");
    let o = eph(&["train", "--config", cfg.to_str().unwrap(), "--seeds", "0..2", "--jobs", "2", "--out", root.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (r0, r1) = (root.join("seed-0"), root.join("seed-1"));

    let out = tmp.path().join("one");
    let o = eph(&["analyze", "--runs", r0.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["fig1d.csv", "fig1e.csv", "fig2a.csv", "fig2b.csv", "fig2c.csv", "fig3a.csv", "fig3b.csv", "summary.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"singleton\": true"));
    let first = read_dir_bytes(&out);
    let o = eph(&["analyze", "--runs", r0.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(read_dir_bytes(&out), first);

    let both = tmp.path().join("both");
    let o = eph(&["analyze", "--runs", r0.to_str().unwrap(), r1.to_str().unwrap(), "--out", both.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(both.join("summary.json")).unwrap();
    assert!(summary.contains("\"singleton\": false"));
    assert!(fs::read_to_string(both.join("fig3b.csv")).unwrap().contains("\npooled,episodic,"));

    let other_cfg = write_config(tmp.path(), "train.lr = 0.001\n");
    let other = tmp.path().join("other");
    train(&other_cfg, 0, &other);
    let o = eph(&["analyze", "--runs", r0.to_str().unwrap(), other.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("different configuration"));
}
