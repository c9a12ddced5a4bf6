use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diffact(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffact"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("DIFFACT_THREADS", "1")
        .output()
        .expect("run diffact")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = diffact(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(out: &Path, seed: &str) {
    ok(&["gen-data", "--tasks", "300", "--seed", seed], out);
    ok(&["train", "--steps", "5", "--seed", seed], out);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(diffact(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(diffact(&["decode", "--rounds", "x"], dir.path()).status.code(), Some(2));
    // Missing inputs are usage errors too.
    let o = diffact(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
    assert_eq!(diffact(&["decode", "--rounds", "0"], dir.path()).status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 1\n[decode]\ntotal_round = 4\n").unwrap();
    let o = diffact(&["gen-data", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("total_round"));
    fs::write(&cfg, "seed = 1\ntasks = 50\n[bench]\nnum_bins = 16\n").unwrap();
    ok(&["gen-data", "--config", cfg.to_str().unwrap()], dir.path());
}

#[test]
fn verify_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["verify"], dir.path());
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 8, "{stdout}");
    assert!(dir.path().join("verify.txt").exists());
    assert!(dir.path().join("verify.manifest.json").exists());
}

#[test]
fn decode_writes_one_trace_line_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    pipeline(out, "3");
    ok(&["decode", "--trace", "--rounds", "7"], out);
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    for (r, line) in lines.iter().enumerate() {
        assert_eq!(line["schema"], "diffact.decode_trace");
        assert_eq!(line["round"], r);
        assert_eq!(line["nfe_so_far"], r + 1);
    }
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("decode.json")).unwrap()).unwrap();
    assert_eq!(record["nfe"], 7);
    assert_eq!(record["tokens"].as_array().unwrap().len(), 56);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("decode.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn ablate_emits_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    pipeline(out, "4");
    ok(&["ablate", "--episodes", "3", "--rounds", "5"], out);
    let mut reader = csv::Reader::from_path(out.join("ablation.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..2], ["strategy", "temperature"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12);
    let digests: std::collections::HashSet<&str> = rows.iter().map(|r| &r[9]).collect();
    assert_eq!(digests.len(), 1, "cells must share one task set");
    for r in &rows {
        assert_eq!(&r[2], "3");
        let nfe: f64 = r[5].parse().unwrap();
        let expected = if &r[0] == "one_shot_parallel" { 1.0 } else { 5.0 };
        assert_eq!(nfe, expected, "{r:?}");
    }
}

#[test]
fn same_seed_reproduces_every_artifact() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        pipeline(dir, "11");
        ok(&["eval", "--episodes", "4"], dir);
    }
    for file in ["dataset.bin", "tokenizer.json", "model.bin", "train_log.csv"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
    // Timing columns differ between runs; compare everything else.
    let strip = |p: &Path| -> Vec<Vec<String>> {
        csv::Reader::from_path(p)
            .unwrap()
            .records()
            .map(|r| {
                let r = r.unwrap();
                r.iter().enumerate().filter(|(i, _)| *i != 6).map(|(_, v)| v.to_string()).collect()
            })
            .collect()
    };
    assert_eq!(strip(&a.path().join("eval.csv")), strip(&b.path().join("eval.csv")));
}
