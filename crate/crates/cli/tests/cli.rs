use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &[&str] = &[
    "--set",
    "data.synthetic.tokens=20000",
    "--set",
    "train.steps=20",
    "--set",
    "search.retrain.steps=4",
    "--set",
    "search.retrain.eval_every=2",
    "--set",
    "distill.train.steps=5",
    "--set",
    "importance.samples=8",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_prunekit"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).args(FAST).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err: Value = serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)));
    (out.status.code().unwrap(), err["error"]["class"].as_str().unwrap().to_string())
}

fn teacher(dir: &Path) {
    ok(dir, &["synth", "--out", "data.bin"]);
    ok(dir, &["train", "--data", "data.bin", "--out", "teacher.mtrf"]);
    ok(dir, &["importance", "--model", "teacher.mtrf", "--data", "data.bin", "--out", "report.json"]);
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn prune_to_source_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    teacher(d);
    let summary = ok(d, &["prune", "--model", "teacher.mtrf", "--report", "report.json", "--out", "same.mtrf"]);
    assert_eq!(summary["params_before"], summary["params_after"]);
    assert_eq!(read(d, "teacher.mtrf"), read(d, "same.mtrf"));

    // The same through an explicit target in a config file.
    let cfg = ok(d, &["config", "--out", "base.toml"]);
    assert_eq!(cfg["config"], "base.toml");
    let mut text = std::fs::read_to_string(d.join("base.toml")).unwrap();
    let model = text.split("[model]").nth(1).unwrap().split("\n[").next().unwrap().to_string();
    text.push_str(&format!("\n[prune.target]{model}"));
    std::fs::write(d.join("self.toml"), text).unwrap();
    let summary = ok(
        d,
        &["prune", "--config", "self.toml", "--model", "teacher.mtrf", "--report", "report.json", "--out", "self.mtrf"],
    );
    assert_eq!(summary["target_from"], "config");
    assert_eq!(read(d, "teacher.mtrf"), read(d, "self.mtrf"));
}

#[test]
fn eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data.bin"]);
    ok(d, &["train", "--data", "data.bin", "--out", "m.mtrf", "--set", "train.steps=3"]);
    let a = ok(d, &["eval", "--model", "m.mtrf", "--data", "data.bin", "--out", "a.json"]);
    let b = ok(d, &["eval", "--model", "m.mtrf", "--data", "data.bin", "--out", "b.json"]);
    assert_eq!(a["loss"].as_f64().unwrap().to_bits(), b["loss"].as_f64().unwrap().to_bits());
    assert_eq!(read(d, "a.json"), read(d, "b.json"));
    assert!(a["loss"].as_f64().unwrap() > 0.0);
    let valid = ok(d, &["eval", "--model", "m.mtrf", "--data", "data.bin", "--set", "eval.split=valid"]);
    assert_eq!(valid["split"], "valid");
}

#[test]
fn fixed_seed_runs_reproduce_metrics() {
    let bundle = |d: &Path| -> Vec<Vec<u8>> {
        ok(d, &["synth", "--out", "data.bin", "--seed", "4"]);
        ok(d, &["train", "--data", "data.bin", "--out", "t.mtrf", "--seed", "4", "--metrics", "train.jsonl"]);
        ["data.bin", "t.mtrf", "train.jsonl"].iter().map(|f| read(d, f)).collect()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(bundle(a.path()), bundle(b.path()));
    let lines = String::from_utf8(read(a.path(), "train.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);
    for l in lines.lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn search_prune_distill_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    teacher(d);
    let s = ok(
        d,
        &["search", "--model", "teacher.mtrf", "--report", "report.json", "--data", "data.bin", "--out", "c.json", "--metrics", "s.jsonl"],
    );
    assert_eq!(s["ranked"], true);
    let count = s["count"].as_u64().unwrap() as usize;
    assert!(count >= 2);
    let manifest: Value = serde_json::from_slice(&read(d, "c.json")).unwrap();
    let last_id = manifest["candidates"][count - 1]["id"].as_u64().unwrap().to_string();
    let p = ok(
        d,
        &["prune", "--model", "teacher.mtrf", "--report", "report.json", "--candidates", "c.json", "--id", &last_id, "--out", "s.mtrf"],
    );
    assert_eq!(p["target"], manifest["candidates"][count - 1]["config"]);
    assert!(p["params_after"].as_u64() < p["params_before"].as_u64());
    let r = ok(
        d,
        &["distill", "--teacher", "teacher.mtrf", "--student", "s.mtrf", "--data", "data.bin", "--out", "f.mtrf", "--metrics", "d.jsonl"],
    );
    assert_eq!(r["steps"], 5);
    assert_eq!(String::from_utf8(read(d, "d.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn errors_are_structured_with_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut seen = Vec::new();

    let missing = fails(d, &["eval", "--model", "nope.mtrf", "--data", "nope.bin"]);
    assert_eq!(missing.1, "missing_file");
    seen.push(missing);

    let config = fails(d, &["synth", "--out", "x.bin", "--set", "model.num_query_groups=3"]);
    assert_eq!(config.1, "invalid_config");
    seen.push(config);
    assert_eq!(fails(d, &["synth", "--out", "x.bin", "--set", "unknown.key=1"]).1, "invalid_config");
    assert_eq!(fails(d, &["synth", "--set", "seed=1"]).1, "invalid_config");

    ok(d, &["synth", "--out", "data.bin"]);
    ok(d, &["train", "--data", "data.bin", "--out", "m.mtrf", "--set", "train.steps=1"]);
    ok(d, &["importance", "--model", "m.mtrf", "--data", "data.bin", "--out", "r.json"]);
    ok(d, &["config", "--out", "base.toml"]);
    let mut text = std::fs::read_to_string(d.join("base.toml")).unwrap();
    let model = text.split("[model]").nth(1).unwrap().split("\n[").next().unwrap().replace("d_model = 64", "d_model = 128");
    text.push_str(&format!("\n[prune.target]{model}"));
    std::fs::write(d.join("wide.toml"), text).unwrap();
    let shape = fails(
        d,
        &["prune", "--config", "wide.toml", "--model", "m.mtrf", "--report", "r.json", "--out", "p.mtrf"],
    );
    assert_eq!(shape.1, "shape_conflict");
    seen.push(shape);
    assert_eq!(
        fails(d, &["eval", "--model", "m.mtrf", "--data", "data.bin", "--set", "model.vocab_size=16"]).1,
        "shape_conflict"
    );

    let mut bytes = read(d, "m.mtrf");
    bytes[0] = b'X';
    std::fs::write(d.join("bad.mtrf"), bytes).unwrap();
    let corrupt = fails(d, &["eval", "--model", "bad.mtrf", "--data", "data.bin"]);
    assert_eq!(corrupt.1, "corrupt_file");
    seen.push(corrupt);

    let data = fails(d, &["eval", "--model", "m.mtrf", "--data", "data.bin", "--set", "eval.batch=100000"]);
    assert_eq!(data.1, "insufficient_data");
    seen.push(data);

    let mut codes: Vec<i32> = seen.iter().map(|s| s.0).collect();
    codes.sort_unstable();
    codes.dedup();
    assert_eq!(codes.len(), seen.len(), "{seen:?}");
    assert!(codes.iter().all(|&c| c != 0 && c != 2));

    let usage = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn ingest_text_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("t.txt"), "ab\n\ncd\n").unwrap();
    let s = ok(d, &["ingest", "--input", "t.txt", "--out", "t.bin"]);
    assert_eq!(s["tokens"], 6);
    assert_eq!(s["documents"], 2);
    let tokens: Vec<u32> = read(d, "t.bin").chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(tokens, vec![97, 98, 10, 99, 100, 10]);
    assert!(d.join("t.json").exists());
}
