use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
image_size = 16
patch_size = 4
embed_dim = 16
proj_dim = 8
proj_hidden = 16
vision_depth = 1
text_depth = 1
decoder_depth = 1
num_heads = 2
batch_size = 4
epochs = 2
warmup_epochs = 1
";

fn mcrlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcrlab"))
        .arg(args[0])
        .arg("--workdir")
        .arg(dir)
        .args(&args[1..])
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary on stdout")
}

fn tiny_corpus(dir: &Path) {
    ok(&mcrlab(dir, &["gen-data", "--n-studies", "12", "--image-size", "16"]));
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
}

#[test]
fn help_lists_config_defaults() {
    let out = Command::new(env!("CARGO_BIN_EXE_mcrlab")).args(["pretrain", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["--image_mask_rate", "[default: 0.5]", "--lambda_mrm", "--align_strategy", "--arm", "--resume"] {
        assert!(text.contains(needle), "help lacks {needle}");
    }
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcrlab(dir.path(), &["pretrain", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    tiny_corpus(dir.path());
    let out = mcrlab(dir.path(), &["pretrain", "--config", "tiny.toml", "--lambda_v", "0.6", "--test-size", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn missing_checkpoint_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let out = mcrlab(dir.path(), &["eval", "--run", "nowhere", "--test-size", "4"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn gen_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&mcrlab(d, &["gen-data", "--n-studies", "5", "--image-size", "16", "--corpus-seed", "3"]));
    }
    for f in ["data/manifest.jsonl", "data/ground_truth.jsonl", "data/vocab.txt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_studies_give_an_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let summary = ok(&mcrlab(dir.path(), &["gen-data", "--n-studies", "0"]));
    assert_eq!(summary["n_studies"], 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("data/manifest.jsonl")).unwrap(), "");
}

#[test]
fn arm_is_echoed_and_applied() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let s = ok(&mcrlab(
        dir.path(),
        &["pretrain", "--config", "tiny.toml", "--test-size", "4", "--arm", "a", "--epochs", "1"],
    ));
    assert_eq!(s["arm"], "a");
    assert_eq!(s["align_strategy"], "abm");
    assert_eq!(s["input_mode"], "masked_only");
    assert_eq!(s["lambda_mrm"], 0.0);
    assert_eq!(s["epochs"], 1);
    let saved = std::fs::read_to_string(dir.path().join("runs/pretrain/config.toml")).unwrap();
    assert!(saved.contains("epochs = 1"));
}

#[test]
fn resumed_run_continues_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let base = ["pretrain", "--config", "tiny.toml", "--test-size", "4"];
    ok(&mcrlab(dir.path(), &[&base[..], &["--out", "full"]].concat()));
    ok(&mcrlab(dir.path(), &[&base[..], &["--out", "split", "--stop-after", "1"]].concat()));
    let s = ok(&mcrlab(dir.path(), &[&base[..], &["--out", "split", "--resume"]].concat()));
    assert_eq!(s["epochs"], 2);
    assert!(s["resumed_from_step"].as_u64().unwrap() > 0);
    let full = std::fs::read_to_string(dir.path().join("full/loss_log.jsonl")).unwrap();
    let split = std::fs::read_to_string(dir.path().join("split/loss_log.jsonl")).unwrap();
    assert_eq!(full, split);

    let changed = mcrlab(dir.path(), &[&base[..], &["--out", "split", "--resume", "--lambda_mim", "0.5"]].concat());
    assert_ne!(changed.status.code(), Some(0));
}

#[test]
fn eval_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    ok(&mcrlab(dir.path(), &["pretrain", "--config", "tiny.toml", "--test-size", "4", "--epochs", "1"]));
    let s = ok(&mcrlab(dir.path(), &["eval", "--test-size", "4", "--ks", "1,2", "--k-max", "3", "--dump-queries", "2"]));
    let out = dir.path().join("runs/pretrain/eval");
    for f in [
        "recall.json",
        "recall.csv",
        "nlg.json",
        "nlg.csv",
        "grouped.json",
        "grouped.csv",
        "gap.json",
        "topk.json",
        "embeddings.bin",
        "embeddings.jsonl",
        "summary.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let recall: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(out.join("recall.json")).unwrap()).unwrap();
    assert_eq!(recall.len(), 4);
    assert!(s.get("timing").is_some());
    let dumps: Vec<Value> = serde_json::from_str(&std::fs::read_to_string(out.join("topk.json")).unwrap()).unwrap();
    assert_eq!(dumps.len(), 4);
}
