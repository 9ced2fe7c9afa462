use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn seqrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrank"))
        .args(args)
        .env_remove("SEQRANK_THREADS")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = seqrank(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// Small cohort plus a briefly trained model in `dir`.
fn fixture(dir: &Path) -> (String, String) {
    let cohort = p(dir, "cohort.jsonl");
    let model = p(dir, "model.bin");
    ok_json(&[
        "gen", "--sites", "4", "--wsis-per-site", "6", "--patches-per-wsi", "10", "--dim", "16", "--seed", "3", "-o",
        &cohort,
    ]);
    ok_json(&["train", &cohort, "--epochs", "3", "--hidden", "12", "--embed", "6", "-o", &model]);
    (cohort, model)
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = p(dir.path(), "a.jsonl");
    let b = p(dir.path(), "b.jsonl");
    let args = |out: &str| {
        vec![
            "gen".to_string(),
            "--sites=4".into(),
            "--wsis-per-site=6".into(),
            "--patches-per-wsi=10".into(),
            "--dim=16".into(),
            "--seed=11".into(),
            "-o".into(),
            out.to_string(),
        ]
    };
    let r = ok_json(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    ok_json(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(r["result"]["patches"], 240);
    assert_eq!(r["result"]["wsis"], 24);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // Header plus one line per record.
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 241);
}

#[test]
fn gen_rejects_too_small_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqrank(&["gen", "--dim", "3", "--sites", "4", "--classes", "2", "-o", &p(dir.path(), "x.jsonl")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(seqrank(&["train"]).status.code(), Some(2));
    assert_eq!(seqrank(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn single_site_sequestered_training_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = p(dir.path(), "one.jsonl");
    ok_json(&["gen", "--sites", "1", "--wsis-per-site", "4", "--patches-per-wsi", "4", "--dim", "8", "-o", &cohort]);
    let out = seqrank(&["train", &cohort, "--sequester", "on", "-o", &p(dir.path(), "m.bin")]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // The same cohort trains without sequestering.
    ok_json(&["train", &cohort, "--sequester", "off", "--epochs", "2", "-o", &p(dir.path(), "m.bin")]);
}

#[test]
fn zero_learning_rate_keeps_loss_flat() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = p(dir.path(), "c.jsonl");
    // No view jitter and one batch holding every record: frozen weights see
    // the same batch each epoch, up to row order.
    ok_json(&[
        "gen", "--sites", "2", "--wsis-per-site", "4", "--patches-per-wsi", "4", "--dim", "8", "--view-jitter", "0",
        "-o", &cohort,
    ]);
    let r = ok_json(&[
        "train", &cohort, "--lr", "0", "--epochs", "5", "--batch", "32", "--sequester", "off", "-o",
        &p(dir.path(), "m.bin"),
    ]);
    let losses: Vec<f64> = r["result"]["epoch_losses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.iter().all(|l| (l - losses[0]).abs() < 1e-12), "{losses:?}");
}

#[test]
fn search_and_lookup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, model) = fixture(dir.path());
    let r = ok_json(&["search", &cohort, "-m", &model, "--query", "W0", "-k", "3", "--exclude-site-of-query"]);
    let hits = r["result"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert!(hits.iter().all(|h| h["site_id"] != "H0" && h["wsi_id"] != "W0"));

    let out = seqrank(&["search", &cohort, "-m", &model, "--query", "W999"]);
    assert_eq!(out.status.code(), Some(4));
    let out = seqrank(&["loho", &cohort, "--holdout", "H9", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = seqrank(&["train", &p(dir.path(), "nope.jsonl"), "-o", &p(dir.path(), "m.bin")]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn eval_writes_report_and_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, model) = fixture(dir.path());
    let report = p(dir.path(), "eval.json");
    let csv = p(dir.path(), "confusion.csv");
    let out = seqrank(&["eval", &cohort, "-m", &model, "-r", &report, "--confusion-csv", &csv]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("macro-F1"));
    let json: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["command"], "eval");
    assert_eq!(json["result"]["n_scored"], 24);
    let csv = std::fs::read_to_string(&csv).unwrap();
    let total: u64 = csv
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()).collect::<Vec<_>>())
        .sum();
    assert_eq!(total, 24);
}

#[test]
fn index_exports_one_line_per_wsi() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, model) = fixture(dir.path());
    let index = p(dir.path(), "index.jsonl");
    let r = ok_json(&["index", &cohort, "-m", &model, "-o", &index]);
    assert_eq!(r["result"]["entries"], 24);
    let text = std::fs::read_to_string(&index).unwrap();
    assert_eq!(text.lines().count(), 24);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["vector"].as_array().unwrap().len(), 6);
    }
}

#[test]
fn probe_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, model) = fixture(dir.path());
    let a = ok_json(&["probe", &cohort, "-m", &model, "--kind", "rff", "--seed", "9"]);
    let b = ok_json(&["probe", &cohort, "-m", &model, "--kind", "rff", "--seed", "9"]);
    assert_eq!(a["result"]["site_accuracy"], b["result"]["site_accuracy"]);
    assert_eq!(a["result"]["n_sites"], 4);
}

#[test]
fn loho_all_sites_table() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, _) = fixture(dir.path());
    let report: PathBuf = dir.path().join("loho.json");
    let out = seqrank(&[
        "loho",
        &cohort,
        "--all-sites",
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--embed",
        "4",
        "-r",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for (row, name) in rows.iter().zip(["H0", "H1", "H2", "H3", "Overall"]) {
        assert!(row.starts_with(name), "{row}");
    }
    let json: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["result"]["sites"].as_array().unwrap().len(), 4);

    let threaded = Command::new(env!("CARGO_BIN_EXE_seqrank"))
        .args(["loho", &cohort, "--all-sites", "--epochs", "2", "--hidden", "8", "--embed", "4"])
        .env("SEQRANK_THREADS", "4")
        .output()
        .unwrap();
    let serial = seqrank(&["loho", &cohort, "--all-sites", "--epochs", "2", "--hidden", "8", "--embed", "4"]);
    assert_eq!(threaded.stdout, serial.stdout);
}
