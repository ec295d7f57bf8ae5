//! End-to-end runs of the `bcosdiff` binary on the tiny preset.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bcosdiff(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bcosdiff"));
    cmd.args(args).env_remove("BCOSDIFF_OUT");
    if let Some(dir) = env_out {
        cmd.env("BCOSDIFF_OUT", dir);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_sample_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    let o = bcosdiff(&["train", "--preset", "tiny", "--steps", "3", "--checkpoint-every", "2", "--out", r], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["final.bcos", "ckpt_0000002.bcos", "loss.txt", "manifest.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("loss.txt")).unwrap().lines().count(), 3);

    let ck = run.join("final.bcos");
    let ck = ck.to_str().unwrap();
    let samples = dir.path().join("samples");
    let o = bcosdiff(
        &["sample", "--checkpoint", ck, "--prompt", "a red ring", "--seed", "4", "--steps", "2", "--count", "2"],
        Some(&samples),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(samples.join("a-red-ring_4.ppm").exists() && samples.join("a-red-ring_5.ppm").exists());

    let ex = dir.path().join("explain");
    let e = ex.to_str().unwrap();
    let o = bcosdiff(&["explain", "--checkpoint", ck, "--prompt", "the blue cross", "--steps", "2", "--out", e], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = fs::read_to_string(ex.join("the-blue-cross_0_relevance.tsv")).unwrap();
    assert!(tsv.contains("# exact_completeness\ttrue"));
    let jsonl = fs::read_to_string(ex.join("the-blue-cross_0_relevance.jsonl")).unwrap();
    let total: f64 = jsonl
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["score"].as_f64().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(jsonl.lines().count(), 3);
    assert!(ex.join("the-blue-cross_0_token02_blue.ppm").exists());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# schedule\nT = 50\nbeta-end = 0.02\n").unwrap();
    let out = dir.path().join("sched");
    let o = bcosdiff(
        &["--config", cfg.to_str().unwrap(), "schedule", "--T", "20", "--out", out.to_str().unwrap()],
        None,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("T = 20"), "{manifest}");
    assert!(manifest.contains("beta_end = 0.02"), "{manifest}");
    assert_eq!(fs::read_to_string(out.join("schedule.txt")).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 21);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = bcosdiff(&["schedule", "--beta-end", "2.0", "--out", out], None);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = bcosdiff(&["train", "--preset", "full", "--out", out], None);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("nope.bcos");
    let o = bcosdiff(&["sample", "--checkpoint", missing.to_str().unwrap(), "--prompt", "a red ring", "--out", out], None);
    assert_eq!(code(&o), 3);
    let o = bcosdiff(&["--config", dir.path().join("absent.cfg").to_str().unwrap(), "schedule"], Some(dir.path()));
    assert_ne!(code(&o), 0);
}
