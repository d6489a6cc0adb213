use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn ghost(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghost"))
        .current_dir(dir)
        .env_remove("GHOST_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn ghost")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ghost(dir, args);
    assert!(
        out.status.success(),
        "ghost {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_corpus(dir: &Path, name: &str, extra: &[&str]) {
    let mut args = vec!["gen", "--out-dir", name, "--n-train", "40", "--n-test", "10"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    assert_eq!(ghost(t.path(), &["bogus"]).status.code(), Some(2));
    assert_eq!(ghost(t.path(), &["search", "--k0", "ten"]).status.code(), Some(2));
    assert_eq!(ghost(t.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn obfuscate_without_map_is_a_runtime_error() {
    let t = TempDir::new().unwrap();
    small_corpus(t.path(), "d", &[]);
    let out = ghost(t.path(), &["obfuscate", "--embeddings", "d/embeddings.ghem", "--dataset", "d/train.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing input") && err.contains("--map"), "{err}");
}

#[test]
fn missing_file_is_a_runtime_error() {
    let t = TempDir::new().unwrap();
    let out = ghost(t.path(), &["search", "--embeddings", "nope.ghem", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn gen_then_search_writes_a_map() {
    let t = TempDir::new().unwrap();
    small_corpus(t.path(), "d", &[]);
    for f in ["embeddings.ghem", "embeddings.vocab.txt", "lemmas.tsv", "train.jsonl", "test.jsonl", "synth.json"] {
        assert!(t.path().join("d").join(f).exists(), "{f}");
    }
    ok(
        t.path(),
        &["search", "--embeddings", "d/embeddings.ghem", "--lemmas", "d/lemmas.tsv", "--k0", "10", "--out", "map.json"],
    );
    let map: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("map.json")).unwrap()).unwrap();
    assert_eq!(map["params"]["k0"], 10);
    assert_eq!(map["entries"].as_object().unwrap().len(), 299);
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    let run = |tag: &str| {
        let d = format!("d{tag}");
        small_corpus(p, &d, &["--seed", "3"]);
        let emb = format!("{d}/embeddings.ghem");
        let map = format!("map{tag}.json");
        let obf = format!("obf{tag}.jsonl");
        ok(p, &["search", "--embeddings", &emb, "--lemmas", &format!("{d}/lemmas.tsv"), "--out", &map]);
        ok(
            p,
            &["obfuscate", "--embeddings", &emb, "--map", &map, "--dataset", &format!("{d}/train.jsonl"), "--out", &obf, "--seed", "3"],
        );
        [format!("{d}/embeddings.ghem"), format!("{d}/train.jsonl"), map, obf]
    };
    let a = run("a");
    let b = run("b");
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(fs::read(p.join(x)).unwrap(), fs::read(p.join(y)).unwrap(), "{x} vs {y}");
    }
    let lines = fs::read_to_string(p.join(&a[3])).unwrap();
    assert_eq!(lines.lines().count(), 40);
}

#[test]
fn seed_flag_and_environment() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    small_corpus(p, "flag", &["--seed", "5"]);
    let out = Command::new(env!("CARGO_BIN_EXE_ghost"))
        .current_dir(p)
        .env("GHOST_SEED", "5")
        .args(["gen", "--out-dir", "env", "--n-train", "40", "--n-test", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_ghost"))
        .current_dir(p)
        .env("GHOST_SEED", "6")
        .args(["gen", "--out-dir", "both", "--n-train", "40", "--n-test", "10", "--seed", "5"])
        .output()
        .unwrap();
    assert!(out.status.success());
    small_corpus(p, "other", &["--seed", "6"]);
    let read = |d: &str| fs::read(p.join(d).join("train.jsonl")).unwrap();
    assert_eq!(read("flag"), read("env"));
    assert_eq!(read("flag"), read("both"));
    assert_ne!(read("flag"), read("other"));
}

#[test]
fn config_file_supplies_seed_and_paths() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    small_corpus(p, "flag", &["--seed", "7"]);
    fs::write(
        p.join("run.json"),
        r#"{"seed": 7, "paths": {"out_dir": "cfg"}, "experiment": {"synth": {"n_train": 40, "n_test": 10}}}"#,
    )
    .unwrap();
    ok(p, &["gen", "--config", "run.json"]);
    assert_eq!(
        fs::read(p.join("flag/train.jsonl")).unwrap(),
        fs::read(p.join("cfg/train.jsonl")).unwrap()
    );
    fs::write(p.join("bad.json"), r#"{"sed": 7}"#).unwrap();
    assert_eq!(ghost(p, &["gen", "--config", "bad.json", "--out-dir", "x"]).status.code(), Some(1));
}

#[test]
fn metrics_scores_text_pairs() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    fs::write(
        p.join("pairs.jsonl"),
        "{\"text\": \"the cat sat\", \"obf_text\": \"the cat sat\"}\n{\"text\": \"a b\", \"obf_text\": \"c d\"}\n",
    )
    .unwrap();
    let out = ok(p, &["metrics", "--input", "pairs.jsonl", "--out", "m.json"]);
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["n_pairs"], 2);
    assert!((r["r1"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(p.join("m.json").exists());
}

#[test]
fn ghost_training_archive_hides_tokens_from_leakage() {
    let t = TempDir::new().unwrap();
    let p = t.path();
    small_corpus(p, "d", &[]);
    let emb = "d/embeddings.ghem";
    ok(p, &["search", "--embeddings", emb, "--lemmas", "d/lemmas.tsv", "--out", "map.json"]);
    ok(
        p,
        &[
            "train", "--embeddings", emb, "--dataset", "d/train.jsonl", "--test", "d/test.jsonl", "--defense", "ghost",
            "--map", "map.json", "--epochs", "1", "--batch-size", "1", "--archive", "rounds.jsonl", "--out-dir", "tr",
        ],
    );
    assert!(p.join("tr/model.ckpt").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("tr/train_report.json")).unwrap()).unwrap();
    assert_eq!(report["defense"]["kind"], "ghost");

    let attack = |extra: &[&str]| -> f64 {
        let mut args = vec!["attack", "--kind", "leakage", "--embeddings", emb, "--dataset", "d/train.jsonl", "--limit", "20", "--out", "a.jsonl"];
        args.extend_from_slice(extra);
        let out = ok(p, &args);
        let s: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        s["leakage"]["r1"].as_f64().unwrap()
    };
    let undefended = attack(&[]);
    let archived = attack(&["--archive", "rounds.jsonl", "--model", "tr/model.ckpt"]);
    assert!(undefended > 0.99, "{undefended}");
    assert!(archived < 0.2, "{archived}");
}
