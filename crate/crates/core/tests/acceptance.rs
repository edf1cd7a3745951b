//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use lret_core::data::{
    generate_synthetic_dataset, jaccard_relevance, save_dataset, load_dataset, IhcPattern, SynthConfig,
};
use lret_core::dml::{contrastive_loss, train_scales, TrainConfig, TrainSchedule, Trainer};
use lret_core::eval::{
    attention_validity_check, cross_validated_benchmark, monte_carlo_permutation_test, BenchmarkConfig,
    BenchmarkOutcome, Method,
};
use lret_core::mil::{ha_tumor_purity, AttentionHead, BagConfig};
use lret_core::model::ArchConfig;
use lret_core::retrieval::{
    build_database, case_distance, export_explanation, query_case, retrieve, save_database, ExtractConfig,
    StoredPatch,
};
use lret_core::rng::{substream, substream_indexed};
use lret_core::{Case, ScaleModels, ScaleSet};
use rand::Rng;

use common::*;

const SEED: u64 = 20240601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(t: Instant, budget: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e <= budget, format!("{:.1}s of {}s", e.as_secs_f64(), budget.as_secs()))
}

fn gradient_suite() -> Verdict {
    let t = Instant::now();
    let mil = (0..100).map(mil_gradient_error).fold(0.0, f64::max);
    let dml = (0..100).map(dml_gradient_error).fold(0.0, f64::max);
    let (fast, time) = within(t, Duration::from_secs(60));
    verdict(
        mil <= 1e-4 && dml <= 1e-4 && fast,
        format!("max rel err bag CE {mil:.2e}, contrastive {dml:.2e} over 100 seeds each (tol 1e-4); {time}"),
    )
}

fn formula_fixtures() -> Verdict {
    let a: IhcPattern = "100111".parse().unwrap();
    let b: IhcPattern = "101111".parse().unwrap();
    let j = jaccard_relevance(&a, &b).unwrap();
    let l = contrastive_loss(&[0.0], &[0.5], 0.5, 1.0).unwrap().0;
    let mut rng = substream(SEED, "fixture-bags");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let h_dim = rng.random_range(1..10);
        let head = AttentionHead::init(h_dim, rng.random_range(1..10), &mut rng).unwrap();
        let n = rng.random_range(1..60);
        let hs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h_dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let w = head.weights(&hs).unwrap();
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    verdict(
        j == 0.8 && l == 0.25 && worst <= 1e-9,
        format!("jaccard {j}, contrastive {l}, max |Σa−1| {worst:.1e} over 1000 bags"),
    )
}

fn oracle_equivalence() -> Verdict {
    let t = Instant::now();
    let mut rng = substream(SEED, "oracle");
    let mut mismatches = 0;
    for i in 0..200 {
        let scales = if i % 2 == 0 { ScaleSet::H } else { ScaleSet::Hl };
        let n = rng.random_range(2..=50);
        let max_ha = rng.random_range(1..=20);
        let dim = rng.random_range(1..=8);
        let db = random_database(&mut rng, n, max_ha, dim, scales);
        let query = if i % 5 == 0 {
            db.entries[0].clone()
        } else {
            random_entry(&mut rng, "query", max_ha, dim, scales.scales().len())
        };
        let got = retrieve(&db, &query, n).unwrap().ranking;
        let want = oracle_ranking(&db, &query);
        let same = got.len() == want.len()
            && got.iter().zip(&want).all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits());
        mismatches += usize::from(!same);
    }
    let (fast, time) = within(t, Duration::from_secs(120));
    verdict(
        mismatches == 0 && fast,
        format!("{mismatches} of 200 rankings differ from the brute-force oracle (100 single-, 100 multi-scale); {time}"),
    )
}

fn ranking_invariances() -> Verdict {
    let mut rng = substream(SEED, "invariance");
    let mut scale_failures = 0;
    let mut growth_failures = 0;
    for i in 0..100 {
        let scales = if i % 2 == 0 { ScaleSet::H } else { ScaleSet::Hl };
        let n_scales = scales.scales().len();
        let n = rng.random_range(2..30);
        let db = random_database(&mut rng, n, 12, 4, scales);
        let query = random_entry(&mut rng, "query", 12, 4, n_scales);
        let base: Vec<String> = retrieve(&db, &query, 0).unwrap().ranking.into_iter().map(|r| r.0).collect();
        for rho in [0.1, 1.0, 10.0] {
            let mut d = db.clone();
            d.entries.iter_mut().for_each(|e| scale_embeddings(e, rho));
            let mut q = query.clone();
            scale_embeddings(&mut q, rho);
            let ids: Vec<String> = retrieve(&d, &q, 0).unwrap().ranking.into_iter().map(|r| r.0).collect();
            scale_failures += usize::from(ids != base);
        }
        for e in &db.entries {
            let before = case_distance(&e.patches, &query.patches).unwrap();
            let mut grown = e.patches.clone();
            let extra = random_entry(&mut rng, "extra", 5, 4, n_scales);
            grown.extend(extra.patches);
            let after = case_distance(&grown, &query.patches).unwrap();
            growth_failures += usize::from(after > before);
        }
    }
    let n = [StoredPatch::new(0, vec![vec![0.0]])];
    let m = [StoredPatch::new(0, vec![vec![0.0]]), StoredPatch::new(1, vec![vec![10.0]])];
    let d_nm = case_distance(&n, &m).unwrap();
    let d_mn = case_distance(&m, &n).unwrap();
    verdict(
        scale_failures == 0 && growth_failures == 0 && d_nm != d_mn,
        format!(
            "rescaling changed {scale_failures} rankings, growth raised D {growth_failures} times; witness D(n,m)={d_nm} vs D(m,n)={d_mn}"
        ),
    )
}

fn attention_validity() -> Verdict {
    let t = Instant::now();
    let synth = SynthConfig::default();
    let ds = generate_synthetic_dataset(&synth).unwrap();
    let cases: Vec<&Case> = ds.cases.iter().collect();
    let cfg = TrainConfig::default();
    let (models, _) = train_scales(&cases, ScaleSet::Hl, &cfg, SEED).unwrap();
    let report = attention_validity_check(&models, &cases, 100, 1000, SEED).unwrap();
    let mut ha_purity = f64::INFINITY;
    for m in models.models() {
        let trainer = Trainer::new(&cases, m.scale, cfg, SEED).unwrap();
        let sel = trainer.selection(m).unwrap();
        ha_purity = ha_purity.min(ha_tumor_purity(&cases, &sel).unwrap());
    }
    let diff = report.high_purity - report.low_purity;
    let (fast, time) = within(t, Duration::from_secs(300));
    verdict(
        diff >= 0.25 && ha_purity >= 2.0 * synth.tumor_fraction && fast,
        format!(
            "highest {:.3} vs lowest {:.3} attention purity (diff {diff:.3} ≥ 0.25) over {} cases; HA purity {ha_purity:.3} ≥ {:.2}; {time}",
            report.high_purity,
            report.low_purity,
            report.n_cases,
            2.0 * synth.tumor_fraction
        ),
    )
}

fn run_benchmark() -> (BenchmarkOutcome, Duration) {
    let t = Instant::now();
    let ds = generate_synthetic_dataset(&SynthConfig::default()).unwrap();
    let out = cross_validated_benchmark(&ds, &BenchmarkConfig::default(), SEED).unwrap();
    (out, t.elapsed())
}

fn method_ordering(bench: &(BenchmarkOutcome, Duration)) -> Verdict {
    let (out, elapsed) = bench;
    let r = &out.report;
    let mean = |m, g| r.row(m, g).unwrap().staining_mean;
    let mut ok = true;
    let mut parts = Vec::new();
    for g in [ScaleSet::H, ScaleSet::L, ScaleSet::Hl] {
        let c = r.comparison(Method::RandomFeatures, g).unwrap();
        let prop = mean(Method::StainingHa, g);
        let sub = mean(Method::SubtypeHa, g);
        ok &= c.mean_difference > 0.0 && c.p_value < 0.05 && prop >= sub;
        parts.push(format!(
            "{}: staining-ha {prop:.3} vs random {:.3} (p={:.1e}), subtype-ha {sub:.3}",
            g.label(),
            mean(Method::RandomFeatures, g),
            c.p_value
        ));
    }
    let hl = mean(Method::StainingHa, ScaleSet::Hl);
    let single = mean(Method::StainingHa, ScaleSet::H).max(mean(Method::StainingHa, ScaleSet::L));
    ok &= hl >= single;
    let fast = *elapsed <= Duration::from_secs(900);
    verdict(
        ok && fast,
        format!(
            "{}; H&L {hl:.3} ≥ best single {single:.3}; {:.1}s of 900s",
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn dominance(bench: &(BenchmarkOutcome, Duration)) -> Verdict {
    let q = &bench.0.report.queries;
    let violations = q.iter().filter(|r| r.staining > r.upper_bound).count();
    verdict(
        violations == 0 && !q.is_empty(),
        format!(
            "{violations} of {} query/method/fold records exceed the upper bound (mean upper bound {:.3})",
            q.len(),
            bench.0.report.upper_bound_mean
        ),
    )
}

fn permutation_test() -> Verdict {
    let outcomes: Vec<bool> = (0..249).map(|i| i < 157).collect();
    let p = monte_carlo_permutation_test(&outcomes, 1_000_000, SEED).unwrap();
    let target = 2.8e-5;
    let mut rejections = 0;
    for study in 0..2000u64 {
        let mut rng = substream_indexed(SEED, "null-study", study);
        let o: Vec<bool> = (0..100).map(|_| rng.random_bool(0.5)).collect();
        let p = monte_carlo_permutation_test(&o, 10_000, SEED ^ study).unwrap();
        rejections += usize::from(p < 0.05);
    }
    let rate = rejections as f64 / 2000.0;
    verdict(
        p >= target / 3.0 && p <= target * 3.0 && (0.03..=0.07).contains(&rate),
        format!("n=249 mean 0.631: p={p:.2e} (target 2.8e-5 within ×3); null rejection rate {rate:.4} over 2000 studies"),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path) {
    let synth = SynthConfig { n_cases: 15, patches_per_case: 120, ..SynthConfig::default() };
    let ds_dir = dir.join("dataset");
    save_dataset(&generate_synthetic_dataset(&synth).unwrap(), &ds_dir).unwrap();
    let ds = load_dataset(&ds_dir).unwrap();
    let cases: Vec<&Case> = ds.cases.iter().collect();
    let train = TrainConfig {
        schedule: TrainSchedule { outer_rounds: 2, dml_epochs_per_round: 2, pairs_per_case: 20, ..TrainSchedule::default() },
        arch: ArchConfig { h_dim: 16, att_dim: 16, clf_hidden: 16, met_hidden: 16, embed_dim: 8 },
        bags: BagConfig { q_train: 100, bag_size: 25, max_bags: 4 },
        ..TrainConfig::default()
    };
    let (models, logs) = train_scales(&cases[3..], ScaleSet::Hl, &train, SEED).unwrap();
    models.save(&dir.join("checkpoints")).unwrap();
    for (log, m) in logs.iter().zip(models.models()) {
        std::fs::write(dir.join(format!("train-{}.log", m.scale)), log.render(false)).unwrap();
    }
    let models = ScaleModels::load(&dir.join("checkpoints"), ScaleSet::Hl).unwrap();
    let extract = ExtractConfig { q_test: 100, ..ExtractConfig::default() };
    let db = build_database(&models, &cases[3..], &extract, ds.grid_cols, SEED).unwrap();
    save_database(&db, &dir.join("db.bin")).unwrap();
    let (entry, result) = query_case(&db, &models, cases[0], 5, SEED).unwrap();
    export_explanation(&result, &entry, &db, &dir.join("query")).unwrap();
    let bench = BenchmarkConfig {
        folds: 2,
        train,
        extract,
        methods: vec![Method::RandomFeatures, Method::StainingHa],
        magnifications: vec![ScaleSet::L, ScaleSet::Hl],
        n_draws: 1000,
        ..BenchmarkConfig::default()
    };
    let out = cross_validated_benchmark(&ds, &bench, SEED).unwrap();
    std::fs::write(dir.join("report.json"), out.report.to_json().unwrap()).unwrap();
    std::fs::write(dir.join("report.txt"), out.report.render_table()).unwrap();
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    verdict(
        ta.len() >= 15 && ta.keys().eq(tb.keys()) && differing.is_empty(),
        format!(
            "{} artifacts compared across two runs (dataset, checkpoints, logs, database, query report, benchmark report); {} differ",
            ta.len(),
            differing.len()
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    report("gradient suite", guarded(gradient_suite));
    report("formula fixtures", guarded(formula_fixtures));
    report("oracle equivalence", guarded(oracle_equivalence));
    report("ranking invariances", guarded(ranking_invariances));
    report("permutation test", guarded(permutation_test));
    report("determinism", guarded(determinism));
    report("attention validity", guarded(attention_validity));
    let bench = catch_unwind(run_benchmark);
    match &bench {
        Ok(b) => {
            report("method ordering", guarded(|| method_ordering(b)));
            report("dominance", guarded(|| dominance(b)));
        }
        Err(_) => {
            report("method ordering", verdict(false, "benchmark panicked"));
            report("dominance", verdict(false, "benchmark panicked"));
        }
    }
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
