use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use lret_core::data::load_dataset;
use lret_core::retrieval::{load_database, query_case};
use lret_core::{ScaleModels, ScaleSet};
use serde_json::json;

const SEED: &str = "11";

fn lret(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lret"))
        .arg("--run-dir")
        .arg(run)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(run: &Path, args: &[&str]) -> String {
    let out = lret(run, args);
    assert!(
        out.status.success(),
        "lret {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small but complete configuration: a handful of cases, two short rounds.
fn small_config(dir: &Path, n_cases: usize) -> PathBuf {
    let cfg = json!({
        "schema_version": 1,
        "seed": 11,
        "scales": "hl",
        "top_k": 3,
        "synth": { "n_cases": n_cases, "patches_per_case": 80, "l": 12, "stains_per_template": 4 },
        "train": {
            "schedule": { "outer_rounds": 2, "mil_epochs_per_round": 1, "dml_epochs_per_round": 1, "pairs_per_case": 10 },
            "bags": { "q_train": 40, "bag_size": 20, "max_bags": 2 },
            "arch": { "h_dim": 16, "att_dim": 16, "clf_hidden": 16, "met_hidden": 16, "embed_dim": 16 }
        },
        "extract": { "q_test": 40 },
        "eval": { "folds": 3, "n_draws": 500, "magnifications": ["h"] }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_fast_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 6);
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let t = Instant::now();
    ok(&a, &["--config", cfg, "gen-data"]);
    assert!(t.elapsed() < Duration::from_secs(1), "gen-data took {:?}", t.elapsed());
    ok(&b, &["--config", cfg, "gen-data"]);
    let (fa, fb) = (files(&a), files(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn missing_seed_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = lret(&run, &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!run.exists());
}

#[test]
fn zero_tumor_fraction_exits_2_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = json!({ "schema_version": 1, "seed": 3, "synth": { "n_cases": 6, "tumor_fraction": 0.0 } });
    let path = tmp.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let run = tmp.path().join("run");
    let out = lret(&run, &["--config", path.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.exists());
}

#[test]
fn train_smoke_on_twelve_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 12);
    let cfg = cfg.to_str().unwrap();
    let run = tmp.path().join("run");
    ok(&run, &["--config", cfg, "gen-data"]);
    let t = Instant::now();
    ok(&run, &["--config", cfg, "train", "--stop-after", "1"]);
    assert!(t.elapsed() < Duration::from_secs(30), "train took {:?}", t.elapsed());
    for s in ["H", "L"] {
        let log = fs::read_to_string(run.join("logs").join(format!("train-{s}.tsv"))).unwrap();
        assert!(log.lines().count() >= 3, "{log}");
        assert!(run.join("train").join(s).join("state.json").exists());
    }
    assert!(!run.join("checkpoints").exists(), "paused training must not publish checkpoints");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 9);
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for run in [&a, &b] {
        ok(run, &["--config", cfg, "gen-data"]);
    }
    ok(&a, &["--config", cfg, "train"]);
    ok(&b, &["--config", cfg, "train", "--stop-after", "1"]);
    ok(&b, &["--config", cfg, "train", "--resume"]);
    assert_eq!(files(&a.join("checkpoints")), files(&b.join("checkpoints")));
    let strip = |p: &Path| -> Vec<String> {
        // Wall-clock column aside, logs are identical.
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once('\t').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    assert_eq!(strip(&a.join("logs/train-H.tsv")), strip(&b.join("logs/train-H.tsv")));
}

#[test]
fn pipeline_query_matches_library_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 9);
    let cfg = cfg.to_str().unwrap();
    let run = tmp.path().join("run");
    ok(&run, &["--config", cfg, "gen-data"]);
    ok(&run, &["--config", cfg, "train"]);
    ok(&run, &["--config", cfg, "build-db"]);
    let ds = load_dataset(&run.join("dataset")).unwrap();
    let id = ds.cases[0].case_id.clone();
    let stdout = ok(&run, &["--config", cfg, "query", "--case", &id]);

    let db = load_database(&run.join("db.bin")).unwrap();
    let models = ScaleModels::load(&run.join("checkpoints"), ScaleSet::Hl).unwrap();
    let (_, expected) = query_case(&db, &models, &ds.cases[0], 3, 11).unwrap();
    let got: Vec<String> = stdout.lines().map(|l| l.split('\t').nth(1).unwrap().to_string()).collect();
    let want: Vec<String> = expected.top.iter().map(|r| r.case_id.clone()).collect();
    assert_eq!(got, want);
    assert!(!got.contains(&id), "query case retrieved itself");

    let qdir = run.join("queries").join(&id);
    let matches = fs::read_to_string(qdir.join("matches.tsv")).unwrap();
    assert!(matches.lines().count() > 1);
    assert!(qdir.join("report.json").exists());
    assert!(qdir.join("heatmaps").join(format!("{id}.txt")).exists());

    ok(&run, &["--config", cfg, "report", "--heatmaps"]);
    assert_eq!(fs::read_dir(run.join("heatmaps")).unwrap().count(), ds.cases.len());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    for c in ["gen-data", "train", "build-db", "query", "report"] {
        assert!(manifest["commands"][c]["config_hash"].is_string(), "{c} missing from manifest");
    }
}

#[test]
fn fingerprint_mismatch_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 6);
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for (run, seed) in [(&a, SEED), (&b, "12")] {
        ok(run, &["--config", cfg, "--seed", seed, "gen-data"]);
        ok(run, &["--config", cfg, "--seed", seed, "train"]);
        ok(run, &["--config", cfg, "--seed", seed, "build-db"]);
    }
    fs::copy(b.join("db.bin"), a.join("db.bin")).unwrap();
    let ds = load_dataset(&a.join("dataset")).unwrap();
    let out = lret(&a, &["--config", cfg, "query", "--case", &ds.cases[0].case_id]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn evaluate_two_methods_emits_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 12);
    let cfg = cfg.to_str().unwrap();
    let run = tmp.path().join("run");
    ok(&run, &["--config", cfg, "gen-data"]);
    let stdout = ok(&run, &["--config", cfg, "evaluate", "--methods", "random-features,staining-ha"]);
    // One block per accuracy measure, each with one row per method.
    for block in stdout.split("\n\n").filter(|b| b.contains("accuracy")) {
        let rows: Vec<&str> = block
            .lines()
            .filter(|l| l.starts_with("random-features") || l.starts_with("staining-ha"))
            .collect();
        assert_eq!(rows.len(), 2, "{stdout}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    let printed = ok(&run, &["--config", cfg, "report"]);
    assert_eq!(printed, stdout);
}
