use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lret_core::data::{generate_synthetic_dataset, load_dataset, save_dataset, stratified_kfold, Dataset};
use lret_core::dml::{Trainer, TrainingState};
use lret_core::eval::{cross_validated_benchmark, BenchmarkReport};
use lret_core::retrieval::{build_database, export_explanation, load_database, query_case, render_heatmap, save_database};
use lret_core::{Case, Error, Result, ScaleModels};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{Cli, Command};

const DATASET_DIR: &str = "dataset";
const TRAIN_DIR: &str = "train";
const CHECKPOINT_DIR: &str = "checkpoints";
const LOG_DIR: &str = "logs";
const DB_FILE: &str = "db.bin";
const EVAL_DIR: &str = "eval";
const MANIFEST: &str = "manifest.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, body).map_err(io_err(path))
}

/// Effective configuration: file (or defaults) with flags applied.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = Some(s);
    }
    if let Some(s) = g.scale {
        cfg.scales = s;
    }
    if let Some(r) = g.relevance {
        cfg.train.schedule.relevance = r;
    }
    if let Some(k) = g.k {
        cfg.top_k = k;
    }
    if let Some(d) = g.draws {
        cfg.eval.n_draws = d;
    }
    if let Command::Evaluate { methods: Some(m) } = &cli.command {
        cfg.eval.methods = m.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = resolve(cli)?;
    let ctx = Ctx {
        dir: cli.global.run_dir.clone(),
        cfg,
        fold: cli.global.fold,
    };
    let outputs = match &cli.command {
        Command::GenData => ctx.gen_data()?,
        Command::Train { resume, stop_after } => ctx.train(*resume, *stop_after)?,
        Command::BuildDb => ctx.build_db()?,
        Command::Query { case } => ctx.query(case)?,
        Command::Evaluate { .. } => ctx.evaluate()?,
        Command::Report { heatmaps } => ctx.report(*heatmaps)?,
    };
    ctx.record(command_name(&cli.command), &outputs)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::Train { .. } => "train",
        Command::BuildDb => "build-db",
        Command::Query { .. } => "query",
        Command::Evaluate { .. } => "evaluate",
        Command::Report { .. } => "report",
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    /// Per command: configuration hash and output digests.
    commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CommandRecord {
    seed: u64,
    config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold: Option<usize>,
    /// Path relative to the run directory → SHA-256 prefix.
    outputs: BTreeMap<String, String>,
}

struct Ctx {
    dir: PathBuf,
    cfg: RunConfig,
    fold: Option<usize>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.seed.expect("validated")
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record(&self, name: &str, outputs: &[PathBuf]) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut manifest: Manifest = match fs::read_to_string(&path) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?,
            Err(_) => Manifest::default(),
        };
        manifest.schema_version = crate::config::SCHEMA_VERSION;
        let mut digests = BTreeMap::new();
        for o in outputs {
            let bytes = fs::read(o).map_err(io_err(o))?;
            let rel = o.strip_prefix(&self.dir).unwrap_or(o).to_string_lossy().replace('\\', "/");
            digests.insert(rel, hex::encode(&Sha256::digest(&bytes)[..8]));
        }
        manifest.commands.insert(
            name.to_string(),
            CommandRecord {
                seed: self.seed(),
                config_hash: self.cfg.hash(),
                fold: self.fold,
                outputs: digests,
            },
        );
        write(&self.path("config.json"), self.cfg.to_json())?;
        write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
    }

    fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.path(DATASET_DIR))
    }

    /// Cases used for training and the database: everything, or one fold's
    /// training and validation cases.
    fn reference_cases<'a>(&self, ds: &'a Dataset) -> Result<Vec<&'a Case>> {
        match self.fold {
            None => Ok(ds.cases.iter().collect()),
            Some(f) => {
                let splits = stratified_kfold(&ds.cases, self.cfg.eval.folds, self.cfg.eval.val_fraction, self.seed())?;
                let split = splits
                    .get(f)
                    .ok_or_else(|| Error::Config(format!("fold {f} out of range 0..{}", splits.len())))?;
                Ok(ds.subset(&split.train_val()))
            }
        }
    }

    fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let mut synth = self.cfg.synth.clone();
        synth.seed = self.seed();
        let ds = generate_synthetic_dataset(&synth)?;
        let out = self.path(DATASET_DIR);
        save_dataset(&ds, &out)?;
        println!("wrote {} cases to {}", ds.cases.len(), out.display());
        Ok(vec![out.join(lret_core::data::MANIFEST_FILE), out.join(lret_core::data::FEATURES_FILE)])
    }

    fn train(&self, resume: bool, stop_after: Option<usize>) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let cases = self.reference_cases(&ds)?;
        let mut outputs = Vec::new();
        let mut finished = Vec::new();
        for &scale in self.cfg.scales.scales() {
            let trainer = Trainer::new(&cases, scale, self.cfg.train, self.seed())?;
            let state_dir = self.path(TRAIN_DIR).join(scale.to_string());
            let mut state = if resume && state_dir.join("state.json").exists() {
                TrainingState::load(&state_dir, scale, self.cfg.train.optimizer)?
            } else {
                trainer.init_state()?
            };
            let start = state.next_round;
            let mut saved_any = start > 0;
            let result = trainer.run(&mut state, stop_after, &mut |s| {
                println!("{scale}: round {}/{} done", s.next_round, self.cfg.train.schedule.outer_rounds);
                saved_any = true;
                s.save(&state_dir)
            });
            let log_path = self.path(LOG_DIR).join(format!("train-{scale}.tsv"));
            write(&log_path, state.log.render(true))?;
            if let Err(e) = result {
                return Err(match e {
                    Error::Divergence(m) if saved_any => Error::Divergence(format!(
                        "{m}; last good checkpoint: {} (round {})",
                        state_dir.display(),
                        state.next_round
                    )),
                    other => other,
                });
            }
            if state.next_round >= self.cfg.train.schedule.outer_rounds {
                finished.push(state.model);
            }
        }
        if finished.len() == self.cfg.scales.scales().len() {
            let models = ScaleModels::new(self.cfg.scales, finished)?;
            let dir = self.path(CHECKPOINT_DIR);
            models.save(&dir)?;
            for m in models.models() {
                for c in lret_core::numcore::Component::ALL {
                    outputs.push(dir.join(m.scale.to_string()).join(format!("{c}.ckpt")));
                }
            }
            println!("checkpoints written to {} (fingerprint {})", dir.display(), models.fingerprint());
        } else {
            println!("training paused; resume with --resume");
        }
        Ok(outputs)
    }

    fn models(&self) -> Result<ScaleModels> {
        ScaleModels::load(&self.path(CHECKPOINT_DIR), self.cfg.scales)
    }

    fn build_db(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let cases = self.reference_cases(&ds)?;
        let models = self.models()?;
        let db = build_database(&models, &cases, &self.cfg.extract, ds.grid_cols, self.seed())?;
        let out = self.path(DB_FILE);
        save_database(&db, &out)?;
        println!("database of {} cases written to {}", db.entries.len(), out.display());
        Ok(vec![out])
    }

    fn query(&self, case_id: &str) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let case = ds
            .case_by_id(case_id)
            .ok_or_else(|| Error::Config(format!("no case {case_id:?} in the dataset")))?;
        let db = load_database(&self.path(DB_FILE))?;
        let models = self.models()?;
        let (entry, result) = query_case(&db, &models, case, self.cfg.top_k, self.seed())?;
        let dir = self.path("queries").join(case_id);
        export_explanation(&result, &entry, &db, &dir)?;
        for (i, r) in result.top.iter().enumerate() {
            println!("{}\t{}\t{:.6}", i + 1, r.case_id, r.distance);
        }
        let mut outputs = vec![dir.join("report.json"), dir.join("matches.tsv")];
        let mut maps: Vec<PathBuf> = fs::read_dir(dir.join("heatmaps"))
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        maps.sort();
        outputs.extend(maps);
        Ok(outputs)
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let ds = self.dataset()?;
        let out = cross_validated_benchmark(&ds, &self.cfg.benchmark(), self.seed())?;
        let dir = self.path(EVAL_DIR);
        for r in &out.runs {
            let p = dir
                .join(LOG_DIR)
                .join(format!("fold{}-{}-{}.tsv", r.fold, r.method, r.scale));
            write(&p, r.log.render(true))?;
        }
        let json = dir.join("report.json");
        let table = dir.join("report.txt");
        write(&json, out.report.to_json()?)?;
        let text = out.report.render_table();
        write(&table, &text)?;
        print!("{text}");
        Ok(vec![json, table])
    }

    fn report(&self, heatmaps: bool) -> Result<Vec<PathBuf>> {
        let mut outputs = Vec::new();
        let json = self.path(EVAL_DIR).join("report.json");
        if json.exists() {
            let text = fs::read_to_string(&json).map_err(io_err(&json))?;
            let report: BenchmarkReport =
                serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", json.display())))?;
            let table = self.path(EVAL_DIR).join("report.txt");
            let rendered = report.render_table();
            write(&table, &rendered)?;
            print!("{rendered}");
            outputs.push(table);
        } else if !heatmaps {
            return Err(Error::io(
                &json,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run `evaluate` first"),
            ));
        }
        if heatmaps {
            let db = load_database(&self.path(DB_FILE))?;
            let dir = self.path("heatmaps");
            for e in &db.entries {
                let p = dir.join(format!("{}.txt", e.case_id));
                write(&p, render_heatmap(&e.heatmap))?;
                outputs.push(p);
            }
            println!("{} heatmaps written to {}", db.entries.len(), dir.display());
        }
        Ok(outputs)
    }
}
