use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json")
}

fn cam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cam")).args(args).env_remove("CAM_SEED").output().expect("spawn cam")
}

fn ok(args: &[&str]) -> Output {
    let out = cam(args);
    assert!(out.status.success(), "cam {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// synth → features → ate → train-clf → train-gen → generate → evaluate under `root`.
fn run_pipeline(root: &Path) {
    let cfg = smoke_config();
    let c = cfg.to_str().unwrap();
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    ok(&["--config", c, "synth", "--seed", "1", "--out", &p("data")]);
    ok(&["--config", c, "features", "--corpus", &p("data/train.jsonl"), "--out", &p("features")]);
    ok(&["--config", c, "ate", "--corpus", &p("data/train.jsonl"), "--seed", "1", "--out", &p("ate")]);
    ok(&["--config", c, "train-clf", "--corpus", &p("data/train.jsonl"), "--ate-report", &p("ate/ate.json"), "--seed", "1", "--out", &p("clf")]);
    ok(&["--config", c, "train-gen", "--corpus", &p("data/train.jsonl"), "--classifiers", &p("clf"), "--seed", "1", "--out", &p("gen")]);
    let generated = ok(&["--config", c, "generate", "--model", &p("gen/model.ckpt"), "--keywords", "museum,album", "--out", &p("sample")]);
    assert!(!String::from_utf8_lossy(&generated.stdout).trim().is_empty());
    ok(&[
        "--config", c, "evaluate", "--model", &p("gen/model.ckpt"), "--corpus", &p("data/test.jsonl"),
        "--classifier", &p("clf/causal.clf"), "--seed", "1", "--out", &p("eval"),
    ]);
}

const ARTIFACTS: [&str; 10] = [
    "data/corpus.jsonl",
    "features/features.csv",
    "ate/ate.json",
    "clf/metric.clf",
    "clf/causal.clf",
    "gen/model.ckpt",
    "gen/losses.json",
    "sample/generation.json",
    "eval/report.json",
    "eval/tables/summary.csv",
];

#[test]
fn subcommand_help_exits_zero() {
    let out = ok(&["ate", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage: cam ate") && text.contains("--tau"), "{text}");
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    for args in [&["bogus"][..], &["ate", "--bogus", "1", "--out", "x"][..]] {
        let out = cam(args);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn unknown_config_keys_are_rejected_with_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"synth": {"samples": 10, "colour": "red"}}"#).unwrap();
    let out = cam(&["--config", cfg.to_str().unwrap(), "synth", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let last = String::from_utf8_lossy(&out.stderr).lines().last().unwrap().to_string();
    let event: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert_eq!(event["level"], "error");
    assert!(event["error"].as_str().unwrap().contains("colour"));
}

#[test]
fn seed_falls_back_to_the_environment_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let env_run = Command::new(env!("CARGO_BIN_EXE_cam"))
        .args(["synth", "--samples", "30", "--out", &out("env")])
        .env("CAM_SEED", "9")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    ok(&["synth", "--samples", "30", "--seed", "9", "--out", &out("flag")]);
    let flag_over_env = Command::new(env!("CARGO_BIN_EXE_cam"))
        .args(["synth", "--samples", "30", "--seed", "9", "--out", &out("both")])
        .env("CAM_SEED", "4")
        .output()
        .unwrap();
    assert!(flag_over_env.status.success());
    let read = |d: &str| fs::read(dir.path().join(d).join("corpus.jsonl")).unwrap();
    assert_eq!(read("env"), read("flag"));
    assert_eq!(read("both"), read("flag"));
    let snapshot: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("env/config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["seed"], 9);
    assert_eq!(snapshot["samples"], 30);
}

#[test]
fn full_pipeline_is_complete_and_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(a.path());
    run_pipeline(b.path());
    for rel in ARTIFACTS {
        let (x, y) = (fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        assert!(x == y, "{rel} differs between identical runs");
    }
    for stage in ["data", "features", "ate", "clf", "gen", "sample", "eval"] {
        assert!(a.path().join(stage).join("config.json").exists(), "{stage} has no config snapshot");
    }
    for fig in ["confusion.svg", "features.svg"] {
        assert!(a.path().join("eval/figures").join(fig).exists());
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("eval/report.json")).unwrap()).unwrap();
    let acc = report["control_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(report["perplexity"].as_f64().unwrap() > 1.0);
    assert!(report["bleurt"].is_null());
}

#[test]
fn cvae_pipeline_trains_generates_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let c = cfg.to_str().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_str().unwrap().to_string();
    ok(&["--config", c, "synth", "--seed", "2", "--out", &p("data")]);
    ok(&["--config", c, "ate", "--corpus", &p("data/train.jsonl"), "--seed", "2", "--out", &p("ate")]);
    ok(&["--config", c, "train-clf", "--corpus", &p("data/train.jsonl"), "--seed", "2", "--out", &p("clf")]);
    let train = ["--config", c, "train-cvae", "--corpus", &p("data/train.jsonl"), "--ate-report", &p("ate/ate.json"), "--variant", "causal", "--epochs", "1", "--seed", "2"];
    ok(&[&train[..], &["--out", &p("cvae")]].concat());
    ok(&[&train[..], &["--out", &p("cvae2")]].concat());
    assert_eq!(fs::read(p("cvae/cvae.ckpt")).unwrap(), fs::read(p("cvae2/cvae.ckpt")).unwrap());
    fs::write(p("ctx.txt"), "The museum opened. They said it.").unwrap();
    let out = ok(&["--config", c, "generate-cvae", "--model", &p("cvae/cvae.ckpt"), "--context-file", &p("ctx.txt"), "--metric", "low"]);
    assert!(!String::from_utf8_lossy(&out.stdout).trim().is_empty());
    ok(&["--config", c, "evaluate", "--model", &p("cvae/cvae.ckpt"), "--corpus", &p("data/test.jsonl"), "--classifier", &p("clf/metric.clf"), "--out", &p("eval")]);
    assert!(dir.path().join("eval/report.json").exists());
}

#[test]
fn causal_cvae_without_treatments_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_str().unwrap().to_string();
    ok(&["synth", "--samples", "20", "--out", &p("data")]);
    let out = cam(&["train-cvae", "--corpus", &p("data/train.jsonl"), "--variant", "causal", "--out", &p("cvae")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ingest_buckets_annotates_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_str().unwrap().to_string();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"kind": "planted", "samples": 120}, "ingest": {"filter": {"min_words": 5}, "keywords": 3, "lda": {"topics": 3, "sweeps": 20}}}"#).unwrap();
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "synth", "--seed", "3", "--out", &p("raw")]);
    assert!(dir.path().join("raw/ground_truth.json").exists());
    ok(&["--config", c, "ingest", "--input", &p("raw/corpus.jsonl"), "--out", &p("ingested")]);
    let train = fs::read_to_string(p("ingested/train.jsonl")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    assert!(doc["buckets"]["participation"].is_string());
    assert_eq!(doc["keywords"].as_array().unwrap().len(), 3);
    assert!(doc["topic"].as_u64().unwrap() < 3);
}
