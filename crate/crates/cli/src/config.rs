use std::fs;
use std::path::Path;

use lret_core::data::SynthConfig;
use lret_core::dml::TrainConfig;
use lret_core::eval::{BenchmarkConfig, Method};
use lret_core::retrieval::ExtractConfig;
use lret_core::{Error, Result, ScaleSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub folds: usize,
    pub val_fraction: f64,
    pub methods: Vec<Method>,
    pub magnifications: Vec<ScaleSet>,
    pub n_draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let b = BenchmarkConfig::default();
        Self {
            folds: b.folds,
            val_fraction: b.val_fraction,
            methods: b.methods,
            magnifications: b.magnifications,
            n_draws: b.n_draws,
        }
    }
}

/// One JSON document configuring every command. Flags override fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub scales: ScaleSet,
    pub top_k: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub extract: ExtractConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            scales: ScaleSet::Hl,
            top_k: 5,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            extract: ExtractConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not {SCHEMA_VERSION}",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        self.train.validate()?;
        self.extract.validate()
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            folds: self.eval.folds,
            val_fraction: self.eval.val_fraction,
            top_k: self.top_k,
            train: self.train,
            extract: self.extract,
            methods: self.eval.methods.clone(),
            magnifications: self.eval.magnifications.clone(),
            n_draws: self.eval.n_draws,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_json().as_bytes())[..8])
    }
}
