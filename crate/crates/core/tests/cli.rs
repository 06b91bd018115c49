use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anchordiff"))
        .args(args)
        .env("ANCHORDIFF_RUNS_DIR", root)
        .output()
        .expect("spawn anchordiff")
}

fn ok(root: &Path, args: &[&str]) -> Value {
    let out = run(root, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err(root: &Path, args: &[&str]) -> String {
    let out = run(root, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    let v: Value = serde_json::from_str(&line).expect("error JSON on stderr");
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_hash_is_stable() {
    let root = tempfile::tempdir().unwrap();
    let a = ok(root.path(), &["gen-data", "--run", "a", "--preset", "tiny", "--seed", "7"]);
    let b = ok(root.path(), &["gen-data", "--run", "b", "--preset", "tiny", "--seed", "7"]);
    assert_eq!(a["corpus_hash"], b["corpus_hash"]);
    let c = ok(root.path(), &["gen-data", "--run", "c", "--preset", "tiny", "--seed", "8"]);
    assert_ne!(a["corpus_hash"], c["corpus_hash"]);
}

#[test]
fn pipeline_runs_end_to_end_and_guards_mismatches() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    assert_eq!(err(r, &["moclip-train", "--run", "x", "--preset", "tiny"]), "missing_input");
    ok(r, &["gen-data", "--run", "x", "--preset", "tiny"]);
    assert_eq!(err(r, &["train", "--run", "x"]), "missing_input");
    ok(r, &["moclip-train", "--run", "x"]);
    let t = ok(r, &["train", "--run", "x", "--strategy", "dynamic", "--lambda-fre", "0.1", "--lambda-tem", "0.5", "--k", "64", "--tap", "down3"]);
    assert_eq!(t["steps"], 5);
    for f in ["logs/train.csv", "logs/gradprobe.csv", "logs/moclip_loss.csv", "checkpoint/meta.json", "moclip/meta.json", "config.json"] {
        assert!(r.join("x").join(f).exists(), "{f} missing");
    }
    let header = std::fs::read_to_string(r.join("x/logs/train.csv")).unwrap();
    assert!(header.starts_with("step,t,l_ddpm,l_fre,l_tem,zeta,total,cond_dropped,wall_ms\n"));

    let s = ok(r, &["sample", "--run", "x", "--caption", "a person jumps", "--frames", "12"]);
    assert_eq!(s["frames"], 12);
    assert!(r.join("x/samples/sample.lmb").exists());
    let m = ok(r, &["eval", "--run", "x"]);
    assert!(m["fid"]["mean"].as_f64().unwrap().is_finite());
    let g = ok(r, &["gradprobe-report", "--run", "x"]);
    assert!(g["rows"].as_u64().unwrap() > 0);
    let d = ok(r, &["dct-analyze", "--run", "x", "--k", "8"]);
    assert!(d["retained_ratio"].as_f64().unwrap() > 0.0);

    // a corpus with different statistics
    ok(r, &["gen-data", "--run", "other", "--preset", "tiny", "--seed", "99"]);
    let other = r.join("other/corpus");
    assert_eq!(err(r, &["eval", "--run", "x", "--corpus", other.to_str().unwrap()]), "config_mismatch");
    // changing a training knob without retraining invalidates the checkpoint
    assert_eq!(err(r, &["eval", "--run", "x", "--lambda-tem", "0.2"]), "config_mismatch");
    // and the corpus settings
    assert_eq!(err(r, &["moclip-train", "--run", "x", "--seed", "5"]), "config_mismatch");
}

#[test]
fn every_weighting_strategy_trains() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(r, &["gen-data", "--run", "s", "--preset", "tiny"]);
    ok(r, &["moclip-train", "--run", "s"]);
    for s in ["static", "learnable", "dynamic"] {
        let t = ok(r, &["train", "--run", "s", "--strategy", s, "--steps", "3"]);
        assert_eq!(t["steps"], 3);
    }
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(r.join("s/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["anchors"]["strategy"], "dynamic_cosine");
}

#[test]
fn locked_run_and_bad_flags_are_reported() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    std::fs::create_dir_all(r.join("busy")).unwrap();
    std::fs::write(r.join("busy/.lock"), "").unwrap();
    assert_eq!(err(r, &["gen-data", "--run", "busy", "--preset", "tiny"]), "locked");
    assert_eq!(err(r, &["train", "--run", "y", "--strategy", "sometimes"]), "usage");
    assert_eq!(err(r, &["gen-data", "--run", "z", "--preset", "tiny", "--seed", "3", "--config", "/nonexistent.json"]), "io");
    let bad = r.join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "colour": 2}"#).unwrap();
    assert_eq!(err(r, &["gen-data", "--run", "z", "--config", bad.to_str().unwrap()]), "json");
}
