//! End-to-end runs of the `kbdm` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

use kbdm::harness::io::read_pgm;

const TINY: &str = "\
count = 24
kb_count = 24
eval_count = 4
codebook_entries = 8
codebook_epochs = 2
classifier_epochs = 3
diffusion_epochs = 1
diffusion_lr = 0.001
timesteps = 50
sample_steps = 5
model_dim = 8
head_hidden = 8
gate_hidden = 4
repeats = 1
";

fn kbdm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbdm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.conf"), format!("{TINY}{extra}")).unwrap();
    dir
}

#[test]
fn gen_data_writes_images_and_tables() {
    let dir = setup("");
    ok(kbdm(dir.path(), &["--config", "tiny.conf", "gen-data", "--out", "data"]));
    let data = dir.path().join("data");
    let img = read_pgm(&data.join("sample_00000.pgm")).unwrap();
    assert_eq!(img.shape(), &[32, 32]);
    assert!(data.join("pose_00023.pgm").exists());
    let labels = std::fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 25);
    let keypoints = std::fs::read_to_string(data.join("keypoints.csv")).unwrap();
    assert!(keypoints.lines().count() > 24);
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = setup("");
    ok(kbdm(dir.path(), &["--config", "tiny.conf", "--seed", "5", "gen-data", "--out", "a"]));
    ok(kbdm(dir.path(), &["--config", "tiny.conf", "--seed", "5", "gen-data", "--out", "b"]));
    ok(kbdm(dir.path(), &["--config", "tiny.conf", "--seed", "6", "gen-data", "--out", "c"]));
    let read = |d: &str| std::fs::read(dir.path().join(d).join("keypoints.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn full_pipeline_from_codebook_to_eval() {
    let dir = setup("");
    let d = dir.path();
    ok(kbdm(d, &["--config", "tiny.conf", "train-codebook", "--out", "cb.kbdm"]));
    assert!(d.join("out/codebook_loss.csv").exists());
    ok(kbdm(d, &["--config", "tiny.conf", "train-classifier", "--codebook", "cb.kbdm", "--out", "clf.kbdm"]));

    let q = ok(kbdm(
        d,
        &["query-kb", "--codebook", "cb.kbdm", "--classifier", "clf.kbdm", "--prompt", "standing,left-facing"],
    ));
    let text = stdout(&q);
    assert_eq!(text.lines().next().unwrap(), "position,standing,left-facing,fused_mean");
    assert_eq!(text.lines().count(), 65);

    ok(kbdm(
        d,
        &[
            "--config", "tiny.conf", "train-diffusion", "--codebook", "cb.kbdm", "--classifier", "clf.kbdm", "--out",
            "dm.kbdm",
        ],
    ));
    let gate = stdout(&ok(kbdm(d, &["inspect-gate", "--ckpt", "dm.kbdm"])));
    let mut lines = gate.lines();
    assert_eq!(lines.next(), Some("timestep,g"));
    let rows: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|&g| g > 0.0 && g < 1.0));

    ok(kbdm(d, &["--config", "tiny.conf", "gen-data", "--out", "data"]));
    let sample = |name: &str| {
        ok(kbdm(
            d,
            &[
                "--seed", "3", "sample", "--ckpt", "dm.kbdm", "--prompt", "standing,left-facing", "--pose",
                "data/pose_00000.pgm", "--steps", "5", "--out", name,
            ],
        ));
        std::fs::read(d.join(name)).unwrap()
    };
    let first = sample("s1.pgm");
    assert_eq!(first, sample("s2.pgm"));
    assert_eq!(read_pgm(&d.join("s1.pgm")).unwrap().shape(), &[32, 32]);

    let eval = stdout(&ok(kbdm(d, &["--config", "tiny.conf", "eval", "--ckpt", "dm.kbdm"])));
    assert!(eval.starts_with("config,pose_pck,frechet_proxy,label_consistency\n+KB+DM+D&C,"));
}

#[test]
fn ablate_writes_both_tables() {
    let dir = setup("");
    let o = ok(kbdm(dir.path(), &["--config", "tiny.conf", "ablate"]));
    let table = std::fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["config", "baseline", "+KB", "+KB+DM", "+KB+DM+D&C"]);
    assert!(dir.path().join("out/ablation_per_seed.csv").exists());
    let report = stdout(&o);
    assert_eq!(report.lines().filter(|l| l.starts_with("HOLDS") || l.starts_with("FAILS")).count(), 3);
}

#[test]
fn config_errors_exit_2() {
    let dir = setup("mystery_key = 1\n");
    assert_eq!(kbdm(dir.path(), &["--config", "tiny.conf", "gen-data"]).status.code(), Some(2));
    let dir = setup("");
    assert_eq!(kbdm(dir.path(), &["--config", "missing.conf", "gen-data"]).status.code(), Some(2));
    // KB conditioning without checkpoints.
    assert_eq!(kbdm(dir.path(), &["--config", "tiny.conf", "train-diffusion"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = setup("");
    std::fs::write(dir.path().join("junk.kbdm"), b"not a checkpoint").unwrap();
    assert_eq!(kbdm(dir.path(), &["inspect-gate", "--ckpt", "junk.kbdm"]).status.code(), Some(3));
    assert_eq!(kbdm(dir.path(), &["inspect-gate", "--ckpt", "absent.kbdm"]).status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = setup("codebook_lr = 1e308\n");
    let o = kbdm(dir.path(), &["--config", "tiny.conf", "train-codebook", "--out", "cb.kbdm"]);
    assert_eq!(o.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}
