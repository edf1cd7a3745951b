use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{mean_and_se, paired_permutation_test};
use super::{ihc_staining_accuracy, subtype_accuracy, upper_bound_accuracy};
use crate::data::{stratified_kfold, Case, Dataset, Scale, ScaleSet};
use crate::dml::{alternate_training, PatchSource, RelevanceKind, TrainConfig, TrainingLog};
use crate::model::{CaseModel, ScaleModels};
use crate::retrieval::{build_database, extract_case, retrieve, EmbedMode, ExtractConfig, PatchSelection};
use crate::rng::{derive_seed, derive_seed_indexed};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Frozen, randomly initialised encoder over uniformly drawn patches.
    RandomFeatures,
    SubtypeAll,
    StainingAll,
    SubtypeHa,
    StainingHa,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::RandomFeatures,
        Method::SubtypeAll,
        Method::StainingAll,
        Method::SubtypeHa,
        Method::StainingHa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RandomFeatures => "random-features",
            Method::SubtypeAll => "subtype-all",
            Method::StainingAll => "staining-all",
            Method::SubtypeHa => "subtype-ha",
            Method::StainingHa => "staining-ha",
        }
    }

    /// Training settings, or `None` for the untrained baseline.
    pub fn train_config(self, base: &TrainConfig) -> Option<TrainConfig> {
        let (relevance, source) = match self {
            Method::RandomFeatures => return None,
            Method::SubtypeAll => (RelevanceKind::Subtype, PatchSource::Uniform),
            Method::StainingAll => (RelevanceKind::Staining, PatchSource::Uniform),
            Method::SubtypeHa => (RelevanceKind::Subtype, PatchSource::Attention),
            Method::StainingHa => (RelevanceKind::Staining, PatchSource::Attention),
        };
        let mut cfg = *base;
        cfg.schedule.relevance = relevance;
        cfg.source = source;
        Some(cfg)
    }

    pub fn extract_config(self, base: &ExtractConfig) -> ExtractConfig {
        let mut cfg = *base;
        match self {
            Method::RandomFeatures => {
                cfg.selection = PatchSelection::Uniform;
                cfg.embed = EmbedMode::Encoder;
            }
            Method::SubtypeAll | Method::StainingAll => {
                cfg.selection = PatchSelection::Uniform;
                cfg.embed = EmbedMode::Metric;
            }
            Method::SubtypeHa | Method::StainingHa => {
                cfg.selection = PatchSelection::Attention;
                cfg.embed = EmbedMode::Metric;
            }
        }
        cfg
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub folds: usize,
    /// Share of each subtype's non-test cases held out as validation; the
    /// benchmark trains on training and validation cases together.
    pub val_fraction: f64,
    pub top_k: usize,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub methods: Vec<Method>,
    pub magnifications: Vec<ScaleSet>,
    pub n_draws: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            val_fraction: 0.2,
            top_k: 5,
            train: TrainConfig::default(),
            extract: ExtractConfig::default(),
            methods: Method::ALL.to_vec(),
            magnifications: vec![ScaleSet::H, ScaleSet::L, ScaleSet::Hl],
            n_draws: 10_000,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.magnifications.is_empty() {
            return Err(Error::Config("benchmark needs methods and magnifications".into()));
        }
        if self.top_k == 0 || self.n_draws == 0 {
            return Err(Error::Config("top_k and n_draws must be positive".into()));
        }
        self.train.validate()?;
        self.extract.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub fold: usize,
    pub method: Method,
    pub magnification: ScaleSet,
    pub query_id: String,
    pub retrieved: Vec<String>,
    pub staining: f64,
    pub subtype: f64,
    pub upper_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub staining_mean: f64,
    pub subtype_mean: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub magnification: ScaleSet,
    pub staining_mean: f64,
    pub staining_se: f64,
    pub subtype_mean: f64,
    pub subtype_se: f64,
    pub upper_bound_mean: f64,
    pub n_queries: usize,
    pub per_fold: Vec<FoldSummary>,
}

/// Paired one-sided test that `better` beats `other` in per-query staining
/// accuracy at one magnification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: Method,
    pub other: Method,
    pub magnification: ScaleSet,
    pub mean_difference: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub comparisons: Vec<Comparison>,
    pub upper_bound_mean: f64,
    pub training_runs: usize,
    pub queries: Vec<QueryRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub fold: usize,
    pub method: Method,
    pub scale: Scale,
    pub log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutcome {
    pub report: BenchmarkReport,
    pub runs: Vec<TrainingRun>,
}

struct FoldResult {
    queries: Vec<QueryRecord>,
    runs: Vec<TrainingRun>,
}

fn needed_scales(mags: &[ScaleSet]) -> Vec<Scale> {
    let set: BTreeSet<usize> = mags.iter().flat_map(|m| m.scales().iter().map(|s| s.index())).collect();
    [Scale::High, Scale::Low]
        .into_iter()
        .filter(|s| set.contains(&s.index()))
        .collect()
}

fn run_fold(
    ds: &Dataset,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<FoldResult> {
    let train: Vec<&Case> = ds.subset(train_idx);
    let test: Vec<&Case> = ds.subset(test_idx);
    let train_seed = derive_seed_indexed(seed, "fold-train", fold as u64);
    let extract_seed = derive_seed_indexed(seed, "fold-extract", fold as u64);
    let scales = needed_scales(&cfg.magnifications);
    let mut queries = Vec::new();
    let mut runs = Vec::new();
    for &method in &cfg.methods {
        let mut models: Vec<CaseModel> = Vec::new();
        for &s in &scales {
            match method.train_config(&cfg.train) {
                None => models.push(CaseModel::init(s, ds.feature_dim, ds.k, &cfg.train.arch, train_seed)?),
                Some(tc) => {
                    let out = alternate_training(&train, s, &tc, train_seed)?;
                    runs.push(TrainingRun {
                        fold,
                        method,
                        scale: s,
                        log: out.log,
                    });
                    models.push(out.model);
                }
            }
        }
        let ec = method.extract_config(&cfg.extract);
        for &mag in &cfg.magnifications {
            let picked = mag
                .scales()
                .iter()
                .map(|s| models.iter().find(|m| m.scale == *s).cloned().expect("scale trained"))
                .collect();
            let sm = ScaleModels::new(mag, picked)?;
            let db = build_database(&sm, &train, &ec, ds.grid_cols, extract_seed)?;
            if let Some(leak) = db.entries.iter().find(|e| test.iter().any(|t| t.case_id == e.case_id)) {
                return Err(Error::Domain(format!(
                    "fold {fold}: test case {} entered the database",
                    leak.case_id
                )));
            }
            let db_ihc = db
                .entries
                .iter()
                .map(|e| e.ihc.as_ref().ok_or_else(|| Error::Unsupported(format!("case {} lacks a staining pattern", e.case_id))))
                .collect::<Result<Vec<_>>>()?;
            for q in &test {
                let entry = extract_case(&sm, q, &ec, ds.grid_cols, extract_seed)?;
                let result = retrieve(&db, &entry, cfg.top_k)?;
                let top: Vec<_> = result
                    .top
                    .iter()
                    .map(|r| db.entries.iter().find(|e| e.case_id == r.case_id).expect("ranked from db"))
                    .collect();
                let q_ihc = q.ihc()?;
                let ihcs = top.iter().map(|e| e.ihc.as_ref().expect("checked above")).collect::<Vec<_>>();
                let subs = top.iter().map(|e| &e.subtype).collect::<Vec<_>>();
                let k = cfg.top_k.min(top.len());
                queries.push(QueryRecord {
                    fold,
                    method,
                    magnification: mag,
                    query_id: q.case_id.clone(),
                    retrieved: result.top.iter().map(|r| r.case_id.clone()).collect(),
                    staining: ihc_staining_accuracy(q_ihc, &ihcs, k)?,
                    subtype: subtype_accuracy(&q.subtype, &subs, k)?,
                    upper_bound: upper_bound_accuracy(q_ihc, &db_ihc, k)?,
                });
            }
        }
    }
    Ok(FoldResult { queries, runs })
}

/// Stratified k-fold evaluation of every configured method and
/// magnification. Each fold trains on its training and validation cases,
/// builds a database from them and queries it with the fold's test cases.
pub fn cross_validated_benchmark(ds: &Dataset, cfg: &BenchmarkConfig, seed: u64) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let splits = stratified_kfold(&ds.cases, cfg.folds, cfg.val_fraction, seed)?;
    let folds = splits
        .par_iter()
        .enumerate()
        .map(|(f, s)| run_fold(ds, f, &s.train_val(), &s.test, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut queries = Vec::new();
    let mut runs = Vec::new();
    for f in folds {
        queries.extend(f.queries);
        runs.extend(f.runs);
    }

    let select = |m: Method, g: ScaleSet| -> Vec<&QueryRecord> {
        queries.iter().filter(|q| q.method == m && q.magnification == g).collect()
    };
    let mut rows = Vec::new();
    for &m in &cfg.methods {
        for &g in &cfg.magnifications {
            let qs = select(m, g);
            let st: Vec<f64> = qs.iter().map(|q| q.staining).collect();
            let su: Vec<f64> = qs.iter().map(|q| q.subtype).collect();
            let (staining_mean, staining_se) = mean_and_se(&st);
            let (subtype_mean, subtype_se) = mean_and_se(&su);
            let per_fold = (0..cfg.folds)
                .map(|f| {
                    let fq: Vec<&&QueryRecord> = qs.iter().filter(|q| q.fold == f).collect();
                    let n = fq.len().max(1) as f64;
                    FoldSummary {
                        fold: f,
                        staining_mean: fq.iter().map(|q| q.staining).sum::<f64>() / n,
                        subtype_mean: fq.iter().map(|q| q.subtype).sum::<f64>() / n,
                        n_queries: fq.len(),
                    }
                })
                .collect();
            rows.push(ReportRow {
                method: m,
                magnification: g,
                staining_mean,
                staining_se,
                subtype_mean,
                subtype_se,
                upper_bound_mean: qs.iter().map(|q| q.upper_bound).sum::<f64>() / qs.len().max(1) as f64,
                n_queries: qs.len(),
                per_fold,
            });
        }
    }

    let mut comparisons = Vec::new();
    if cfg.methods.contains(&Method::StainingHa) {
        for &g in &cfg.magnifications {
            let best = select(Method::StainingHa, g);
            for &other in cfg.methods.iter().filter(|&&m| m != Method::StainingHa) {
                let rest = select(other, g);
                let diffs: Vec<f64> = best.iter().zip(&rest).map(|(a, b)| a.staining - b.staining).collect();
                let p = paired_permutation_test(
                    &diffs,
                    cfg.n_draws,
                    derive_seed(seed, &format!("compare/{other}/{g}")),
                )?;
                comparisons.push(Comparison {
                    better: Method::StainingHa,
                    other,
                    magnification: g,
                    mean_difference: diffs.iter().sum::<f64>() / diffs.len() as f64,
                    p_value: p,
                });
            }
        }
    }

    let ub_rows: Vec<f64> = queries
        .iter()
        .filter(|q| q.method == cfg.methods[0] && q.magnification == cfg.magnifications[0])
        .map(|q| q.upper_bound)
        .collect();
    let report = BenchmarkReport {
        config: cfg.clone(),
        seed,
        rows,
        comparisons,
        upper_bound_mean: ub_rows.iter().sum::<f64>() / ub_rows.len().max(1) as f64,
        training_runs: runs.len(),
        queries,
    };
    Ok(BenchmarkOutcome { report, runs })
}

impl BenchmarkReport {
    pub fn row(&self, method: Method, magnification: ScaleSet) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.magnification == magnification)
    }

    pub fn comparison(&self, other: Method, magnification: ScaleSet) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.other == other && c.magnification == magnification)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Malformed(e.to_string()))
    }

    /// Methods down, magnifications across, `mean ± SE` per cell for
    /// staining and subtype accuracy.
    pub fn render_table(&self) -> String {
        let mags = &self.config.magnifications;
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let mut out = String::new();
        for (title, pick) in [
            ("staining accuracy", (|r: &ReportRow| (r.staining_mean, r.staining_se)) as fn(&ReportRow) -> (f64, f64)),
            ("subtype accuracy", |r: &ReportRow| (r.subtype_mean, r.subtype_se)),
        ] {
            let _ = writeln!(out, "{title} (top-{})", self.config.top_k);
            let _ = write!(out, "{:<18}", "method");
            for g in mags {
                let _ = write!(out, " {:>15}", g.label());
            }
            out.push('\n');
            for &m in &methods {
                let _ = write!(out, "{:<18}", m.name());
                for &g in mags {
                    match self.row(m, g) {
                        Some(r) => {
                            let (mean, se) = pick(r);
                            let _ = write!(out, " {:>15}", format!("{mean:.3} ± {se:.3}"));
                        }
                        None => {
                            let _ = write!(out, " {:>15}", "-");
                        }
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        let _ = writeln!(out, "upper bound (staining): {:.3}", self.upper_bound_mean);
        out
    }
}
