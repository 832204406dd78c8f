use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/small.toml");

fn lvt(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvt"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("LVT_THREADS")
        .output()
        .unwrap()
}

fn ok_json(out: &Path, args: &[&str]) -> Value {
    let o = lvt(out, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).unwrap()
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let c = ["--config", SMALL];
    let corpus = ok_json(out, &[&c[..], &["gen-corpus"]].concat());
    assert_eq!(corpus["train_count"], 32);
    ok_json(out, &[&c[..], &["train-tokenizer"]].concat());
    ok_json(out, &[&c[..], &["train-denoiser", "--limit", "4"]].concat());
    let lm = ok_json(out, &[&c[..], &["train-lm"]].concat());
    assert_eq!(lm["pairs"], 32);
    for (name, steps) in [("tokenizer", 20), ("denoiser", 20), ("lm", 20)] {
        assert_eq!(lines(&out.join(format!("metrics/{name}.jsonl"))), steps);
    }

    let t = ok_json(out, &[&c[..], &["tokenize", "--id", "33"]].concat());
    assert_eq!(t["id"], 33);
    let n = t["tokens"].as_u64().unwrap();
    assert!((1..=6).contains(&n));
    assert_eq!(t["codes"].as_array().unwrap().len() as u64, n);
    assert!(t["codes"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c.as_u64().unwrap() < 8));

    let g = ok_json(
        out,
        &[&c[..], &["generate-image", "--prompt", "1,4", "--denoise"]].concat(),
    );
    assert_eq!(g["candidates"].as_array().unwrap().len(), 2);
    assert!(g["codes"].as_array().unwrap().len() <= 8);
    if !g["codes"].as_array().unwrap().is_empty() {
        assert_eq!(g["signal"].as_array().unwrap().len(), 48);
    }
    let again = ok_json(
        out,
        &[&c[..], &["generate-image", "--prompt", "1,4", "--denoise"]].concat(),
    );
    assert_eq!(g, again, "same seed, same sample");

    let text = ok_json(out, &[&c[..], &["generate-text"]].concat());
    assert_eq!(text["id"], 32);
    assert!(text["caption"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l.as_u64().unwrap() < 6));
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        ok_json(out, &["--config", SMALL, "gen-corpus"]);
        ok_json(
            out,
            &["--config", SMALL, "--metrics", "csv", "train-tokenizer"],
        );
    }
    for f in [
        "corpus/train.lvtc",
        "metrics/tokenizer.csv",
        "tokenizer.ckpt",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        lines(&a.path().join("metrics/tokenizer.csv")),
        21,
        "header plus one row per step"
    );

    let c = tempfile::tempdir().unwrap();
    ok_json(c.path(), &["--config", SMALL, "--seed", "5", "gen-corpus"]);
    assert_ne!(
        std::fs::read(a.path().join("corpus/train.lvtc")).unwrap(),
        std::fs::read(c.path().join("corpus/train.lvtc")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(lvt(out, &["--help"])), 0);
    assert_eq!(code(lvt(out, &["bogus"])), 1);
    assert_eq!(code(lvt(out, &["--metrics", "yaml", "gen-corpus"])), 1);
    assert_eq!(code(lvt(out, &["ablate", "nope"])), 1);
    assert_eq!(code(lvt(out, &["accept", "--only", "13"])), 1);

    let bad = out.join("bad.toml");
    std::fs::write(&bad, "[tokenizer]\nrho = 2.0").unwrap();
    assert_eq!(
        code(lvt(out, &["--config", bad.to_str().unwrap(), "gen-corpus"])),
        1
    );
    std::fs::write(&bad, "unknown = 1").unwrap();
    assert_eq!(
        code(lvt(out, &["--config", bad.to_str().unwrap(), "gen-corpus"])),
        1
    );

    // Runtime failure: nothing trained yet.
    assert_eq!(code(lvt(out, &["--config", SMALL, "train-lm"])), 2);

    ok_json(out, &["--config", SMALL, "gen-corpus"]);
    assert_eq!(
        code(lvt(
            out,
            &["--config", SMALL, "generate-image", "--prompt", "1,x"]
        )),
        1
    );

    let o = Command::new(env!("CARGO_BIN_EXE_lvt"))
        .args([
            "--out",
            out.to_str().unwrap(),
            "--config",
            SMALL,
            "gen-corpus",
        ])
        .env("LVT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_lvt"))
        .args([
            "--out",
            out.to_str().unwrap(),
            "--config",
            SMALL,
            "gen-corpus",
        ])
        .env("LVT_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok_json(out, &["--config", SMALL, "gen-corpus"]);
    ok_json(out, &["--config", SMALL, "train-tokenizer"]);
    let other = out.join("other.toml");
    let text = std::fs::read_to_string(SMALL)
        .unwrap()
        .replace("steps = 20\n[denoiser]", "steps = 21\n[denoiser]");
    std::fs::write(&other, text).unwrap();
    let o = lvt(out, &["--config", other.to_str().unwrap(), "tokenize"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn ablate_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = lvt(out, &["--config", SMALL, "ablate", "fixed-vs-dynamic"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("| fixed |") && stdout.contains("| dynamic |"));
    let table: Value =
        serde_json::from_slice(&std::fs::read(out.join("ablation-fixed-vs-dynamic.json")).unwrap())
            .unwrap();
    assert_eq!(table["rows"][0]["setting"], "fixed");
    assert_eq!(
        table["rows"][0]["values"][0], 6.0,
        "fixed keeps every patch"
    );
}

#[test]
fn accept_runs_selected_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = lvt(out, &["accept", "--only", "2,3,4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let verdicts: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("PASS") || l.starts_with("FAIL"))
        .collect();
    assert_eq!(verdicts.len(), 3);
    assert!(verdicts.iter().all(|l| l.starts_with("PASS")));
    assert!(stdout.contains("3/3 criteria passed"));
    let report = std::fs::read_to_string(out.join("accept.jsonl")).unwrap();
    let ids: Vec<u64> = report
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["id"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(ids, vec![2, 3, 4]);
}
