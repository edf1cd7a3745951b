use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ha_pools, sample_pairs, train_dml_epoch, DmlOptimizer, RelevanceKind, RelevanceMatrix};
use crate::data::{Case, Scale, ScaleSet};
use crate::mil::{
    build_bags, ha_tumor_purity, select_ha_patches, train_mil_epoch, validate_fraction, Bag, BagConfig,
    HaSelection, MilOptimizer,
};
use crate::model::{ArchConfig, CaseModel, ScaleModels};
use crate::numcore::{Component, OptimizerState, SgdConfig};
use crate::numcore::Checkpoint;
use crate::rng::{substream, substream_indexed};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub outer_rounds: usize,
    pub mil_epochs_per_round: usize,
    pub dml_epochs_per_round: usize,
    pub margin: f64,
    pub pairs_per_case: usize,
    pub relevance: RelevanceKind,
    pub exclude_self_pairs: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            outer_rounds: 10,
            mil_epochs_per_round: 1,
            dml_epochs_per_round: 10,
            margin: 1.0,
            pairs_per_case: 100,
            relevance: RelevanceKind::Staining,
            exclude_self_pairs: false,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.mil_epochs_per_round == 0 || self.dml_epochs_per_round == 0 || self.pairs_per_case == 0 {
            return Err(Error::Config("epoch and pair counts must be positive".into()));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        Ok(())
    }
}

/// Where DML draws its patches from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchSource {
    /// HA patches refreshed after every MIL epoch.
    Attention,
    /// Uniformly drawn patches; the MIL phase is skipped.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub optimizer: SgdConfig,
    pub arch: ArchConfig,
    pub bags: BagConfig,
    /// Fraction of each bag kept as HA patches.
    pub m_fraction: f64,
    pub source: PatchSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            optimizer: SgdConfig::STANDARD,
            arch: ArchConfig::default(),
            bags: BagConfig::default(),
            m_fraction: 0.1,
            source: PatchSource::Attention,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.arch.validate()?;
        self.bags.validate()?;
        validate_fraction(self.m_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mil,
    Dml,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Mil => "mil",
            Phase::Dml => "dml",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based outer round.
    pub round: usize,
    pub phase: Phase,
    /// 1-based epoch counter within the phase, across rounds.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Tumor fraction among HA patches after a MIL epoch.
    pub ha_purity: Option<f64>,
    pub wall_ms: u64,
}

/// One line per epoch, tab separated:
/// `round  phase  epoch  mean_loss  ha_purity  wall_ms`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "round\tphase\tepoch\tmean_loss\tha_purity\twall_ms";

    pub fn epochs(&self, phase: Phase) -> usize {
        self.records.iter().filter(|r| r.phase == phase).count()
    }

    /// Text rendering; without timing the output is reproducible byte for
    /// byte and the last column is omitted.
    pub fn render(&self, timing: bool) -> String {
        let mut out = String::new();
        if timing {
            out.push_str(Self::HEADER);
        } else {
            out.push_str(Self::HEADER.trim_end_matches("\twall_ms"));
        }
        out.push('\n');
        for r in &self.records {
            let purity = r.ha_purity.map_or_else(|| "-".to_string(), |p| format!("{p:.6}"));
            let _ = write!(out, "{}\t{}\t{}\t{:.12e}\t{}", r.round, r.phase, r.epoch, r.mean_loss, purity);
            if timing {
                let _ = write!(out, "\t{}", r.wall_ms);
            }
            out.push('\n');
        }
        out
    }
}

/// Everything needed to continue training after `next_round - 1` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub model: CaseModel,
    pub mil_opt: MilOptimizer,
    pub dml_opt: DmlOptimizer,
    /// 0-based index of the next outer round.
    pub next_round: usize,
    pub log: TrainingLog,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    next_round: usize,
    log: TrainingLog,
}

const STATE_FILE: &str = "state.json";

fn velocity_files(state: &TrainingState) -> [(&'static str, Component, &OptimizerState); 5] {
    [
        ("mil-enc.vel", Component::Enc, &state.mil_opt.encoder),
        ("mil-att.vel", Component::Att, &state.mil_opt.attention),
        ("mil-clf.vel", Component::Clf, &state.mil_opt.classifier),
        ("dml-enc.vel", Component::Enc, &state.dml_opt.encoder),
        ("dml-met.vel", Component::Met, &state.dml_opt.metric),
    ]
}

impl TrainingState {
    pub fn fresh(model: CaseModel, optimizer: SgdConfig) -> Self {
        Self {
            mil_opt: MilOptimizer::new(&model, optimizer),
            dml_opt: DmlOptimizer::new(&model, optimizer),
            model,
            next_round: 0,
            log: TrainingLog::default(),
        }
    }

    /// Writes weights, momentum buffers (checkpoint format) and `state.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        for (name, component, opt) in velocity_files(self) {
            let path = dir.join(name);
            let ckpt = self.model.checkpoint(component).with_data(&opt.velocity)?;
            fs::write(&path, ckpt.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(STATE_FILE);
        let body = serde_json::to_string_pretty(&StateFile {
            next_round: self.next_round,
            log: self.log.clone(),
        })
        .map_err(|e| Error::Malformed(e.to_string()))?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, scale: Scale, optimizer: SgdConfig) -> Result<Self> {
        let model = CaseModel::load(dir, scale)?;
        let mut state = Self::fresh(model, optimizer);
        let mut velocities = Vec::new();
        for (name, component, _) in velocity_files(&state) {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let ckpt = Checkpoint::from_bytes(&bytes)?;
            if ckpt.component != component || ckpt.scale != scale {
                return Err(Error::Incompatible(format!("{} holds {}/{}", path.display(), ckpt.scale, ckpt.component)));
            }
            velocities.push(ckpt.arrays.into_iter().map(|a| a.data).collect::<Vec<_>>());
        }
        let targets = [
            &mut state.mil_opt.encoder,
            &mut state.mil_opt.attention,
            &mut state.mil_opt.classifier,
            &mut state.dml_opt.encoder,
            &mut state.dml_opt.metric,
        ];
        for (opt, v) in targets.into_iter().zip(velocities) {
            let shapes_match = opt.velocity.len() == v.len()
                && opt.velocity.iter().zip(&v).all(|(a, b)| a.len() == b.len());
            if !shapes_match {
                return Err(Error::Incompatible("momentum buffers do not match the model".into()));
            }
            opt.velocity = v;
        }
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: StateFile = serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        state.next_round = file.next_round;
        state.log = file.log;
        Ok(state)
    }
}

/// Alternating MIL/DML optimisation of one scale's model on a fixed set of
/// training cases. Bags are drawn once per trainer.
#[derive(Debug)]
pub struct Trainer<'a> {
    cases: &'a [&'a Case],
    scale: Scale,
    cfg: TrainConfig,
    seed: u64,
    bags: Vec<Bag>,
    relevance: RelevanceMatrix,
}

impl<'a> Trainer<'a> {
    pub fn new(cases: &'a [&'a Case], scale: Scale, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cases.is_empty() {
            return Err(Error::Config("no training cases".into()));
        }
        let relevance = RelevanceMatrix::new(cases, cfg.schedule.relevance)?;
        let mut rng = substream(seed, &format!("bags/{scale}"));
        let bags = cases
            .iter()
            .enumerate()
            .flat_map(|(i, c)| build_bags(i, c, &cfg.bags, &mut rng))
            .collect();
        Ok(Self {
            cases,
            scale,
            cfg,
            seed,
            bags,
            relevance,
        })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn init_state(&self) -> Result<TrainingState> {
        let first = self.cases[0];
        let feature_dim = first
            .patches
            .first()
            .ok_or_else(|| Error::Config(format!("case {} has no patches", first.case_id)))?
            .features(self.scale)?
            .len();
        let model = CaseModel::init(self.scale, feature_dim, first.subtype.k, &self.cfg.arch, self.seed)?;
        Ok(TrainingState::fresh(model, self.cfg.optimizer))
    }

    /// HA patches of every training case under `model`.
    pub fn selection(&self, model: &CaseModel) -> Result<HaSelection> {
        select_ha_patches(model, self.cases, &self.bags, self.scale, self.cfg.m_fraction)
    }

    /// One outer round. On error `state` is left at the end of the previous
    /// round.
    pub fn run_round(&self, state: &mut TrainingState) -> Result<()> {
        let mut next = state.clone();
        self.advance(&mut next).map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!(
                "{m} in round {}; last good state is after round {}",
                state.next_round + 1,
                state.next_round
            )),
            other => other,
        })?;
        *state = next;
        Ok(())
    }

    fn advance(&self, st: &mut TrainingState) -> Result<()> {
        let sched = &self.cfg.schedule;
        let r = st.next_round;
        let scale = self.scale;
        let pools = match self.cfg.source {
            PatchSource::Attention => {
                let mut selection = None;
                for e in 0..sched.mil_epochs_per_round {
                    let t = Instant::now();
                    let idx = (r * sched.mil_epochs_per_round + e) as u64;
                    let mut rng = substream_indexed(self.seed, &format!("mil-order/{scale}"), idx);
                    let m = train_mil_epoch(&mut st.model, self.cases, &self.bags, scale, &mut st.mil_opt, &mut rng)?;
                    let sel = self.selection(&st.model)?;
                    st.log.records.push(LogRecord {
                        round: r + 1,
                        phase: Phase::Mil,
                        epoch: idx as usize + 1,
                        mean_loss: m.mean_loss,
                        ha_purity: ha_tumor_purity(self.cases, &sel),
                        wall_ms: t.elapsed().as_millis() as u64,
                    });
                    selection = Some(sel);
                }
                ha_pools(selection.as_ref().expect("at least one MIL epoch"))
            }
            PatchSource::Uniform => self.cases.iter().map(|c| (0..c.patches.len()).collect()).collect(),
        };
        let mut rng = substream_indexed(self.seed, &format!("pairs/{scale}"), r as u64);
        let pairs = sample_pairs(&pools, sched.pairs_per_case, &self.relevance, sched.exclude_self_pairs, &mut rng)?;
        for e in 0..sched.dml_epochs_per_round {
            let t = Instant::now();
            let idx = (r * sched.dml_epochs_per_round + e) as u64;
            let mut rng = substream_indexed(self.seed, &format!("dml-order/{scale}"), idx);
            let loss = train_dml_epoch(&mut st.model, self.cases, &pairs, scale, sched.margin, &mut st.dml_opt, &mut rng)?;
            st.log.records.push(LogRecord {
                round: r + 1,
                phase: Phase::Dml,
                epoch: idx as usize + 1,
                mean_loss: loss,
                ha_purity: None,
                wall_ms: t.elapsed().as_millis() as u64,
            });
        }
        st.next_round += 1;
        Ok(())
    }

    /// Runs rounds until `outer_rounds` (or `stop_after`) have completed,
    /// calling `on_round` after each.
    pub fn run(
        &self,
        state: &mut TrainingState,
        stop_after: Option<usize>,
        on_round: &mut dyn FnMut(&TrainingState) -> Result<()>,
    ) -> Result<()> {
        let end = stop_after.map_or(self.cfg.schedule.outer_rounds, |s| s.min(self.cfg.schedule.outer_rounds));
        while state.next_round < end {
            self.run_round(state)?;
            on_round(state)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: CaseModel,
    pub log: TrainingLog,
}

/// Full alternating schedule from a seeded initialisation.
pub fn alternate_training(cases: &[&Case], scale: Scale, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let trainer = Trainer::new(cases, scale, *cfg, seed)?;
    let mut state = trainer.init_state()?;
    trainer.run(&mut state, None, &mut |_| Ok(()))?;
    Ok(TrainOutcome {
        model: state.model,
        log: state.log,
    })
}

/// Independent models per active scale.
pub fn train_scales(
    cases: &[&Case],
    scales: ScaleSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ScaleModels, Vec<TrainingLog>)> {
    let mut models = Vec::new();
    let mut logs = Vec::new();
    for &s in scales.scales() {
        let out = alternate_training(cases, s, cfg, seed)?;
        models.push(out.model);
        logs.push(out.log);
    }
    Ok((ScaleModels::new(scales, models)?, logs))
}
