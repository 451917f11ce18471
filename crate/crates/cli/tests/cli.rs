use std::path::Path;
use std::process::{Command, Output};

use stegflow_core::checkpoint::Checkpoint;
use stegflow_core::colorspace::{quantize_to_storage, RgbImage};
use stegflow_core::flow::{init_model, FlowConfig, TrainingStage};
use stegflow_core::pipeline::EmbeddingSettings;

fn stegflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stegflow"))
        .args(args)
        .env_remove("STEGFLOW_RUN_DIR")
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// An untrained (identity) flow marked as stage-1 trained, enough to drive hide/reveal.
fn identity_checkpoint(path: &Path) {
    let mut model = init_model(&FlowConfig::toy(), 0).unwrap();
    model.set_stage(TrainingStage::Likelihood);
    Checkpoint::new(model, EmbeddingSettings::default()).save(path).unwrap();
}

fn gray_png(path: &Path, size: usize) {
    let img = RgbImage::from_fn(size, size, |x, y| {
        let v = 0.25 + 0.5 * ((x * 7 + y * 3) % size) as f64 / size as f64;
        [v, v, v]
    });
    quantize_to_storage(&img).write_png(path).unwrap();
}

#[test]
fn every_command_has_help() {
    for cmd in [
        "train-stage1",
        "train-stage2",
        "hide",
        "reveal",
        "eval",
        "ablate-rounds",
        "synth-data",
    ] {
        let out = stegflow(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd} --help failed");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn missing_data_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = stegflow(&["--run-dir", p(dir.path()), "train-stage1", "--size", "16"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.dir"), "{}", stderr(&out));
}

#[test]
fn stage2_needs_an_init_checkpoint() {
    let out = stegflow(&["train-stage2"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = stegflow(&["train-stage2", "--init-checkpoint", p(&missing), "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn oversized_payload_reports_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.ckpt");
    let host = dir.path().join("host.png");
    identity_checkpoint(&model);
    gray_png(&host, 128);

    let big = dir.path().join("big.bin");
    std::fs::write(&big, vec![0xa5u8; 4093]).unwrap();
    let out_png = dir.path().join("c.png");
    let out = stegflow(&["hide", "--model", p(&model), "--host", p(&host), "--in", p(&big), "--out", p(&out_png)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("at most 4092"), "{}", stderr(&out));
    assert!(!out_png.exists());

    let fits = dir.path().join("fits.bin");
    std::fs::write(&fits, vec![0x5au8; 4092]).unwrap();
    let out = stegflow(&["-q", "hide", "--model", p(&model), "--host", p(&host), "--in", p(&fits), "--out", p(&out_png)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(out_png.exists());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.ckpt");
    std::fs::write(&model, b"not a checkpoint").unwrap();
    let host = dir.path().join("host.png");
    gray_png(&host, 16);
    let out = stegflow(&["reveal", "--model", p(&model), "--container", p(&host), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("magic"), "{}", stderr(&out));
}

#[test]
fn tiny_training_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(stegflow(&["synth-data", "--out", p(&data), "--count", "6", "--size", "16"]).status.success());

    let train = |run_dir: &Path| {
        let out = Command::new(env!("CARGO_BIN_EXE_stegflow"))
            .args([
                "-q",
                "train-stage1",
                "--data",
                p(&data),
                "--size",
                "16",
                "--layers",
                "2",
                "--hidden",
                "8",
                "--epochs",
                "2",
                "--batch",
                "3",
                "--seed",
                "5",
                "--name",
                "tiny",
            ])
            .env("STEGFLOW_RUN_DIR", run_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
        run_dir.join("tiny")
    };
    let a = train(&dir.path().join("a"));
    let b = train(&dir.path().join("b"));

    let ckpt = a.join("checkpoints").join("stage1.ckpt");
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.model.stage(), TrainingStage::Likelihood);
    assert_eq!(loaded.model.config().coupling_layers, 2);
    assert!(a.join("config.toml").exists());
    assert!(a.join("train_stage1.jsonl").exists());
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(b.join("checkpoints/stage1.ckpt")).unwrap());
    assert_eq!(
        std::fs::read(a.join("train_stage1.jsonl")).unwrap(),
        std::fs::read(b.join("train_stage1.jsonl")).unwrap()
    );
}
