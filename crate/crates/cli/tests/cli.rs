use std::path::Path;
use std::process::{Command, Output};

use faxis::eval::EvalReport;
use faxis::io::load_index;
use faxis::{QueryOptions, QueryWeights};
use serde_json::Value;

fn faxis(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faxis"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = faxis(args, cwd);
    assert!(out.status.success(), "faxis {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// synth, two trained heads, embeddings and an index in `dir`.
fn small_index(dir: &Path) {
    ok(&["synth", "--out", "data", "--speakers", "4", "--sentences", "6", "--seed", "3"], dir);
    ok(
        &["train", "--manifest", "data/manifest.jsonl", "--axis", "semantic", "--steps", "50", "--batch-size", "8", "--out", "sem.fphd", "--log", "sem.log"],
        dir,
    );
    ok(
        &["train", "--manifest", "data/manifest.jsonl", "--axis", "speaker_id", "--objective", "supcon_labels", "--dim", "8", "--steps", "50", "--batch-size", "8", "--out", "spk.fphd"],
        dir,
    );
    ok(&["embed", "--manifest", "data/manifest.jsonl", "--head", "sem.fphd", "--head", "spk.fphd", "--out", "emb.jsonl"], dir);
    ok(&["build-index", "--embeddings", "emb.jsonl", "--out", "idx"], dir);
}

#[test]
fn pipeline_produces_a_queryable_index() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_index(dir);
    assert!(dir.join("emb.fpeb").exists());
    assert_eq!(std::fs::read_to_string(dir.join("sem.log")).unwrap().lines().count(), 50);

    let stdout = ok(&["query", "--index", "idx", "--query-id", "spk00_sent002_r0", "--weights", "semantic=1,speaker_id=-0.5", "--k", "4"], dir);
    let rows: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);

    let index = load_index(dir.join("idx")).unwrap();
    let q = &index.get("spk00_sent002_r0").unwrap().embedding;
    let w = QueryWeights::new().with("semantic", 1.0).with("speaker_id", -0.5);
    let want = index.query(q, &w, 4, &QueryOptions::excluding("spk00_sent002_r0")).unwrap();
    for (row, r) in rows.iter().zip(&want.results) {
        assert_eq!(row["item_id"], r.item_id.as_str());
        assert_eq!(row["rank"], r.rank);
    }

    let stdout = ok(&["query", "--index", "idx", "--query-id", "spk00_sent002_r0", "--k", "1", "--include-self", "--weights", "semantic=1"], dir);
    assert!(stdout.contains("\"spk00_sent002_r0\""));
    let stdout = ok(&["query", "--index", "idx", "--query-id", "spk00_sent002_r0", "--k", "50", "--corpus-ne", "query"], dir);
    assert_eq!(stdout.lines().count(), 18);
}

#[test]
fn eval_writes_a_report_and_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_index(dir);
    let out = faxis(
        &["eval", "--index", "idx", "--weights", "semantic=1,speaker_id=1", "--weights", "semantic=1,speaker_id=-1", "--query-corpus", "query", "--seed", "3"],
        dir,
    );
    assert!(out.status.success());
    let report = EvalReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(report.settings.len(), 2);
    assert_eq!(report.n_queries, 6);
    assert_eq!(report.metadata.seed, Some(3));
    assert_eq!(report.metadata.config_hash.as_ref().unwrap().len(), 64);
    let table = String::from_utf8(out.stderr).unwrap();
    assert!(table.contains("ss/same") && table.contains("ceiling: 100.0% (6 of 6 queries retrievable)"));
}

#[test]
fn config_file_supplies_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("synth.json"), r#"{"out": "d", "speakers": 2, "sentences": 3, "seed": 1}"#).unwrap();
    ok(&["synth", "--config", "synth.json", "--sentences", "4"], dir);
    let manifest = std::fs::read_to_string(dir.join("d/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2 * 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_index(dir);
    let code = |args: &[&str]| faxis(args, dir).status.code().unwrap();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["query", "--index", "idx"]), 1);

    let out = faxis(&["query", "--index", "idx", "--query-id", "spk00_sent000_r0", "--weights", "gender=1"], dir);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("gender") && err.contains("semantic, speaker_id"), "{err}");

    assert_eq!(code(&["query", "--index", "idx", "--query-id", "nobody"]), 2);
    assert_eq!(code(&["build-index", "--embeddings", "missing.jsonl", "--out", "x"]), 2);
    assert_eq!(code(&["train", "--manifest", "data/manifest.jsonl", "--axis", "semantic", "--lr", "-1", "--out", "h"]), 1);
    assert_eq!(code(&["synth", "--config", "absent.json"]), 1);
}
