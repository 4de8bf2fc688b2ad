//! The `listener` binary end to end on a tiny configuration: exit codes,
//! artifacts, resume, inspect, evaluation and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use listener_diffusion::pipeline::RunConfig;
use listener_diffusion::synth::read_dataset;

fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.out_dir = out.to_path_buf();
    c.count = 6;
    c.test_count = 2;
    c.quantizer.max_epochs = 3;
    c.listener.max_epochs = 2;
    c
}

fn write_config(dir: &Path, config: &RunConfig) -> PathBuf {
    write_named(dir, "config.json", config)
}

fn write_named(dir: &Path, name: &str, config: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, config.to_json()).unwrap();
    path
}

fn run(config: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_listener"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).env("LISTENER_THREADS", "1").output().expect("binary runs")
}

fn ok(out: Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

/// synth → train-vqvae → train-diffusion → generate in `dir`.
fn full_run(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, &tiny(&dir.join("out")));
    for cmd in ["synth", "train-vqvae", "train-diffusion", "generate"] {
        ok(run(Some(&cfg), &[cmd]));
    }
    cfg
}

#[test]
fn emitted_default_config_parses_back() {
    for preset in ["full", "desk"] {
        let out = run(None, &["--preset", preset, "--emit-default-config"]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let parsed = RunConfig::from_json(&text).unwrap();
        assert_eq!(parsed.to_json().trim(), text.trim());
    }
}

#[test]
fn config_problems_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "count": 4, "no_such_field": 1 }"#).unwrap();
    assert_eq!(run(Some(&bad), &["synth"]).status.code(), Some(1));

    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(Some(&bad), &["synth"]).status.code(), Some(1));

    // T not divisible by τ
    let mut c = tiny(dir.path());
    c.data.frames = 100;
    let path = write_config(dir.path(), &c);
    let out = run(Some(&path), &["synth"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));

    let out = Command::new(env!("CARGO_BIN_EXE_listener"))
        .args(["--preset", "desk", "synth"])
        .env("LISTENER_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(run(None, &["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(None, &[]).status.code(), Some(1));
}

#[test]
fn data_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(dir.path()));
    // nothing synthesized yet
    assert_eq!(run(Some(&cfg), &["train-vqvae"]).status.code(), Some(2));

    ok(run(Some(&cfg), &["synth"]));
    let data = dir.path().join("dataset.dlds");
    let mut bytes = std::fs::read(&data).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 0xFF;
    std::fs::write(&data, &bytes).unwrap();
    let out = run(Some(&cfg), &["train-vqvae"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CRC"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint").unwrap();
    assert_eq!(run(None, &["inspect", junk.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn full_workflow_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = full_run(dir.path());
    let out = dir.path().join("out");
    for f in [
        "dataset.dlds",
        "test.dlds",
        "vqvae.ckpt",
        "vqvae_history.csv",
        "diffusion.ckpt",
        "diffusion_history.csv",
        "generated.dlds",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("vqvae_history.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("epoch,") && header.ends_with(",config_hash"), "{header}");
    assert_eq!(csv.lines().count(), 1 + 3);

    let generated = read_dataset(&out.join("generated.dlds")).unwrap();
    let test = read_dataset(&out.join("test.dlds")).unwrap();
    assert_eq!(generated.len(), test.len());
    for (g, t) in generated.samples.iter().zip(&test.samples) {
        assert_eq!(g.listener.len(), 240);
        assert_eq!(g.listener.width(), 8);
        assert_eq!(g.speaker, t.speaker);
    }

    let eval = run(Some(&cfg), &["evaluate"]);
    assert!(eval.status.success());
    let table = String::from_utf8(eval.stdout).unwrap();
    assert!(table.contains("P-FD") && table.contains("full"), "{table}");
    assert!(out.join("report.json").is_file() && out.join("report.txt").is_file());

    // two samples per input double the output and still evaluate
    ok(run(Some(&cfg), &["generate", "--samples", "2"]));
    assert_eq!(read_dataset(&out.join("generated.dlds")).unwrap().len(), 2 * test.len());
    assert!(run(Some(&cfg), &["evaluate"]).status.success());
}

#[test]
fn ground_truth_scored_against_itself_has_zero_l2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny(dir.path()));
    ok(run(Some(&cfg), &["synth"]));
    let test = dir.path().join("test.dlds");
    let t = test.to_str().unwrap();
    let out = run(Some(&cfg), &["evaluate", "--generated", t, "--reference", t]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["l2"].as_f64(), Some(0.0));
    assert!(report["fd"].as_f64().unwrap().abs() < 1e-6);
    assert!((report["diversity"].as_f64().unwrap() - report["gt_diversity"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn resume_continues_epoch_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.quantizer.patience = 0;
    c.listener.patience = 0;
    let cfg = write_config(dir.path(), &c);
    ok(run(Some(&cfg), &["synth"]));
    let first = ok(run(Some(&cfg), &["train-vqvae"]));
    assert_eq!(first["epochs_trained"], 3);
    let again = ok(run(Some(&cfg), &["train-vqvae", "--resume"]));
    assert_eq!(again["epochs_trained"], 6);
    let csv = std::fs::read_to_string(dir.path().join("vqvae_history.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("3,"), "{csv}");

    ok(run(Some(&cfg), &["train-diffusion"]));
    let d = ok(run(Some(&cfg), &["train-diffusion", "--resume"]));
    assert_eq!(d["epochs_trained"], 4);
}

#[test]
fn inspect_reports_usage_schedule_and_parameters() {
    let dir = tempfile::tempdir().unwrap();
    full_run(dir.path());
    let out = dir.path().join("out");
    let config = tiny(&out);

    let vq = ok(run(None, &["inspect", out.join("vqvae.ckpt").to_str().unwrap()]));
    assert_eq!(vq["kind"], "vqvae");
    let usage: Vec<f64> = serde_json::from_value(vq["usage"].clone()).unwrap();
    assert_eq!(usage.len(), config.quantizer.codebook_size);
    assert!(usage.iter().sum::<f64>() > 0.0);
    let p = vq["perplexity"].as_f64().unwrap();
    assert!(p >= 1.0 && p <= config.quantizer.codebook_size as f64 + 1e-9);
    assert!(vq["parameters"].as_u64().unwrap() > 0);

    let diff = ok(run(None, &["inspect", out.join("diffusion.ckpt").to_str().unwrap()]));
    assert_eq!(diff["kind"], "diffusion");
    let sched = config.listener.diffusion.build(config.quantizer.codebook_size).unwrap();
    assert!((diff["gamma_bar_final"].as_f64().unwrap() - sched.gamma_bar()[sched.steps()]).abs() < 1e-12);
    assert_eq!(diff["positions"], 30);
    assert!(diff["parameters"].as_u64().unwrap() > 0);
}

#[test]
fn same_seed_gives_byte_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path());
    full_run(b.path());
    for f in ["dataset.dlds", "test.dlds", "vqvae.ckpt", "diffusion.ckpt", "generated.dlds"] {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between identical runs");
    }

    // a different seed changes the data
    let c = tempfile::tempdir().unwrap();
    let cfg = write_config(c.path(), &tiny(c.path()));
    ok(run(Some(&cfg), &["--seed", "9", "synth"]));
    let x = std::fs::read(a.path().join("out/dataset.dlds")).unwrap();
    let y = std::fs::read(c.path().join("dataset.dlds")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn generate_names_the_mismatched_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = full_run(dir.path());
    let out = dir.path().join("out");

    // a quantizer with a different K in place of the trained one
    let other = dir.path().join("other");
    let mut c = tiny(&other);
    c.quantizer.codebook_size = 8;
    let other_cfg = write_named(dir.path(), "other.json", &c);
    ok(run(Some(&other_cfg), &["synth"]));
    ok(run(Some(&other_cfg), &["train-vqvae"]));
    let saved = dir.path().join("saved.ckpt");
    std::fs::copy(out.join("vqvae.ckpt"), &saved).unwrap();
    std::fs::copy(other.join("vqvae.ckpt"), out.join("vqvae.ckpt")).unwrap();
    let res = run(Some(&cfg), &["generate"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("`K`"));

    std::fs::copy(&saved, out.join("vqvae.ckpt")).unwrap();

    // a config asking for another condition width
    let mut c = tiny(&out);
    c.listener.fusion.cond_dim = 32;
    let wide = write_named(dir.path(), "wide.json", &c);
    let res = run(Some(&wide), &["generate"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("d_cond"));
}
