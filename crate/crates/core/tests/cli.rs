//! End-to-end runs of the `pda` binary on a small simulated log.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pda_core::experiment::ReportSummary;

fn pda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pda"))
        .args(args)
        .env("PDA_THREADS", "2")
        .output()
        .expect("spawn pda")
}

fn ok(args: &[&str]) -> String {
    let out = pda(args);
    assert!(
        out.status.success(),
        "pda {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path) -> std::path::PathBuf {
    let log = dir.join("log.tsv");
    ok(&[
        "simulate", "--seed", "3", "--users", "120", "--items", "60", "--stages", "4",
        "--events-per-stage", "1500", "--drift", "3", "--out", s(&log),
    ]);
    log
}

#[test]
fn step_by_step_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let log = simulate(dir);
    assert!(dir.join("log.tsv.world.json").exists());
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 4 * 1500);

    let split = dir.join("split.json");
    ok(&[
        "prepare", "--input", s(&log), "--kcore", "0", "--stages", "4", "--seed", "3", "--out",
        s(&split),
    ]);

    let mut reports = Vec::new();
    for method in ["bprmf", "pd", "pda"] {
        let ckpt = dir.join(format!("{method}.ckpt"));
        ok(&[
            "train", "--split", s(&split), "--method", method, "--seed", "3", "--gamma", "0.1",
            "--lr", "0.02", "--dim", "8", "--max-epochs", "5", "--patience", "3", "--out",
            s(&ckpt),
        ]);
        let log_lines = fs::read_to_string(dir.join(format!("{method}.ckpt.log.jsonl"))).unwrap();
        assert!(log_lines.lines().next().unwrap().contains("\"seed\":3"));
        let report = dir.join(format!("{method}.json"));
        ok(&[
            "evaluate", "--split", s(&split), "--method", method, "--checkpoint", s(&ckpt),
            "--k", "10,20", "--out", s(&report),
        ]);
        let r: ReportSummary = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r.metrics.metrics.keys().copied().collect::<Vec<_>>(), vec![10, 20]);
        reports.push(report);
    }
    let pop_report = dir.join("mostpop.json");
    ok(&[
        "evaluate", "--split", s(&split), "--method", "mostpop", "--k", "10,20", "--out",
        s(&pop_report),
    ]);

    let md = ok(&["compare", s(&reports[0]), s(&reports[1]), s(&reports[2]), s(&pop_report)]);
    assert!(md.contains("bprmf") && md.contains("pda") && md.contains("mostpop"));
    let csv = ok(&["compare", "--format", "csv", s(&reports[0]), s(&reports[1])]);
    assert_eq!(csv.lines().next().unwrap(), "method,k,metric,value,ri_percent");
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 4);

    let drift = ok(&["analyze", "drift", "--input", s(&log), "--kcore", "0", "--stages", "4"]);
    let rows: Vec<&str> = drift.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "stage,dp_next,dp_from_first");
    assert_eq!(rows.len(), 1 + 4);

    let rr = dir.join("rr.csv");
    ok(&[
        "analyze", "rr", "--split", s(&split), "--method", "pd", "--checkpoint",
        s(&dir.join("pd.ckpt")), "--k", "10", "--groups", "5", "--out", s(&rr),
    ]);
    let text = fs::read_to_string(&rr).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 5);
    let total: f64 = rows[1..]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn seed_is_mandatory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pda(&["simulate", "--out", s(&tmp.path().join("x.tsv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    let out = pda(&["train", "--split", "s.json", "--method", "pd", "--out", "m.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn unknown_method_is_rejected() {
    let out = pda(&["train", "--split", "s.json", "--method", "svd", "--seed", "1", "--out", "m"]);
    assert!(!out.status.success());
}

const RUN_CONFIG: &str = r#"
kcore = 0
stages = 4
method = "pd"
seed = 8
gamma_grid = { start = 0.05, stop = 0.1, step = 0.05 }

[data.simulate]
num_users = 100
num_items = 50
stages = 4
events_per_stage = 1200

[train]
learning_rate = 0.02
embedding_dim = 8
max_epochs = 4
patience = 2
"#;

#[test]
fn run_is_reproducible_and_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, RUN_CONFIG).unwrap();
    let a = tmp.path().join("a");
    let files = ["metrics.json", "rr.csv", "drift.csv", "train_log.jsonl", "config.toml", "model.ckpt"];
    ok(&["run", "--config", s(&cfg), "--output-dir", s(&a)]);
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(a.join(f)).unwrap()).collect();
    ok(&["run", "--config", s(&cfg), "--output-dir", s(&a)]);
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(a.join(f)).unwrap(), bytes, "{f} differs on rerun");
    }

    let report: serde_json::Value = serde_json::from_slice(&first[0]).unwrap();
    assert_eq!(report["seed"], 8);
    assert_eq!(report["method"], "pd");
    assert_eq!(report["test_reads_during_selection"], 0);
    assert_eq!(report["grid"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(a.join("config.toml")).unwrap().starts_with("# method=pd seed=8"));
    for f in ["rr.csv", "drift.csv"] {
        let text = fs::read_to_string(a.join(f)).unwrap();
        assert!(text.starts_with("# method=pd seed=8"), "{f} lacks provenance");
        assert!(text.contains("# config="));
    }
    let first = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 8);

    // method and seed overrides land in the artifacts
    let c = tmp.path().join("c");
    ok(&["run", "--config", s(&cfg), "--method", "mostpop", "--seed", "9", "--output-dir", s(&c)]);
    let v: serde_json::Value = serde_json::from_slice(&fs::read(c.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(v["method"], "mostpop");
    assert_eq!(v["seed"], 9);
}
