//! Contrastive distance-metric learning over HA patches and the alternating
//! MIL/DML trainer.

mod train;

pub use train::{
    alternate_training, train_scales, LogRecord, PatchSource, Phase, TrainConfig, TrainOutcome, TrainSchedule, Trainer,
    TrainingLog, TrainingState,
};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{jaccard_relevance, subtype_relevance, Case, Scale};
use crate::mil::HaSelection;
use crate::model::CaseModel;
use crate::numcore::{sgd_momentum_step, DenseGrad, OptimizerState, SgdConfig};
use crate::{Error, Result};

/// `z = f_met(f_enc(x))` for one patch at one scale.
pub fn embed_patch(model: &CaseModel, case: &Case, patch: usize, scale: Scale) -> Result<Vec<f64>> {
    let p = case
        .patches
        .get(patch)
        .ok_or_else(|| Error::Domain(format!("case {} has no patch index {patch}", case.case_id)))?;
    model.embed(p.features(scale)?)
}

/// `r·d² + (1−r)·max(G−d, 0)²` with gradients for both embeddings.
///
/// The hinge contributes no gradient at `d = 0` or `d ≥ G`.
pub fn contrastive_loss(z_i: &[f64], z_j: &[f64], r: f64, margin: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if z_i.len() != z_j.len() {
        return Err(Error::Shape(format!("embedding dims {} vs {}", z_i.len(), z_j.len())));
    }
    if !(0.0..=1.0).contains(&r) || margin.is_nan() || margin <= 0.0 {
        return Err(Error::Domain(format!("relevance {r} or margin {margin} out of range")));
    }
    let diff: Vec<f64> = z_i.iter().zip(z_j).map(|(a, b)| a - b).collect();
    let d = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    let hinge = (margin - d).max(0.0);
    let loss = r * d * d + (1.0 - r) * hinge * hinge;
    let mut coef = 2.0 * r;
    if d > 0.0 && d < margin {
        coef -= 2.0 * (1.0 - r) * hinge / d;
    }
    let gi: Vec<f64> = diff.iter().map(|x| coef * x).collect();
    let gj: Vec<f64> = gi.iter().map(|x| -x).collect();
    Ok((loss, gi, gj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceKind {
    /// Jaccard index of IHC staining patterns.
    Staining,
    /// 1 for equal subtypes, else 0.
    Subtype,
}

impl std::fmt::Display for RelevanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RelevanceKind::Staining => "staining",
            RelevanceKind::Subtype => "subtype",
        })
    }
}

impl std::str::FromStr for RelevanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "staining" => Ok(RelevanceKind::Staining),
            "subtype" => Ok(RelevanceKind::Subtype),
            other => Err(Error::Config(format!("unknown relevance kind {other:?}"))),
        }
    }
}

/// Case-pair relevance, computed once per training set.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix {
    pub kind: RelevanceKind,
    n: usize,
    values: Vec<f64>,
}

impl RelevanceMatrix {
    pub fn new(cases: &[&Case], kind: RelevanceKind) -> Result<Self> {
        let n = cases.len();
        let mut values = vec![0.0; n * n];
        for a in 0..n {
            for b in a..n {
                let r = match kind {
                    RelevanceKind::Staining => jaccard_relevance(cases[a].ihc()?, cases[b].ihc()?)?,
                    RelevanceKind::Subtype => subtype_relevance(&cases[a].subtype, &cases[b].subtype)?,
                };
                values[a * n + b] = r;
                values[b * n + a] = r;
            }
        }
        Ok(Self { kind, n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.n + b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchRef {
    pub case: usize,
    /// Index into `Case::patches`.
    pub patch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPair {
    pub a: PatchRef,
    pub b: PatchRef,
    pub relevance: f64,
}

/// Draws `min(pairs_per_case, pool)` patches per case, shuffles them into one
/// pool and pairs neighbours so each drawn patch appears in exactly one pair.
/// An odd pool drops its last element.
///
/// With `exclude_self`, a same-case neighbour is swapped for the next patch
/// from another case; patches that cannot be matched that way are dropped.
pub fn sample_pairs<R: Rng + ?Sized>(
    pools: &[Vec<usize>],
    pairs_per_case: usize,
    relevance: &RelevanceMatrix,
    exclude_self: bool,
    rng: &mut R,
) -> Result<Vec<PatchPair>> {
    if pools.len() != relevance.len() {
        return Err(Error::Shape(format!(
            "{} patch pools for {} relevance rows",
            pools.len(),
            relevance.len()
        )));
    }
    let mut drawn = Vec::new();
    for (case, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::Domain(format!("case index {case} has no candidate patches")));
        }
        let take = pairs_per_case.min(pool.len());
        for i in index::sample(rng, pool.len(), take) {
            drawn.push(PatchRef { case, patch: pool[i] });
        }
    }
    drawn.shuffle(rng);
    let mut pairs = Vec::with_capacity(drawn.len() / 2);
    let mut i = 0;
    while i + 1 < drawn.len() {
        if exclude_self && drawn[i].case == drawn[i + 1].case {
            match (i + 2..drawn.len()).find(|&j| drawn[j].case != drawn[i].case) {
                Some(j) => drawn.swap(i + 1, j),
                None => break,
            }
        }
        let (a, b) = (drawn[i], drawn[i + 1]);
        pairs.push(PatchPair {
            a,
            b,
            relevance: relevance.get(a.case, b.case),
        });
        i += 2;
    }
    Ok(pairs)
}

/// Candidate pools from an HA selection.
pub fn ha_pools(selection: &HaSelection) -> Vec<Vec<usize>> {
    selection
        .cases
        .iter()
        .map(|c| c.patches.iter().map(|p| p.patch).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlOptimizer {
    pub encoder: OptimizerState,
    pub metric: OptimizerState,
}

impl DmlOptimizer {
    pub fn new(model: &CaseModel, cfg: SgdConfig) -> Self {
        Self {
            encoder: OptimizerState::new(&model.encoder, cfg),
            metric: OptimizerState::new(&model.metric, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlGrads {
    pub encoder: DenseGrad,
    pub metric: DenseGrad,
}

impl DmlGrads {
    pub fn zeros_like(model: &CaseModel) -> Self {
        Self {
            encoder: DenseGrad::zeros_like(&model.encoder),
            metric: DenseGrad::zeros_like(&model.metric),
        }
    }

    fn fill_zero(&mut self) {
        self.encoder.fill_zero();
        self.metric.fill_zero();
    }
}

/// Contrastive loss of one raw-feature pair through `f_met ∘ f_enc`;
/// gradients are added into `grads`.
pub fn pair_loss_and_grad(
    model: &CaseModel,
    x_a: &[f64],
    x_b: &[f64],
    relevance: f64,
    margin: f64,
    grads: &mut DmlGrads,
) -> Result<f64> {
    let (h_a, enc_a) = model.encoder.forward(x_a)?;
    let (h_b, enc_b) = model.encoder.forward(x_b)?;
    let (z_a, met_a) = model.metric.forward(&h_a)?;
    let (z_b, met_b) = model.metric.forward(&h_b)?;
    let (loss, g_a, g_b) = contrastive_loss(&z_a, &z_b, relevance, margin)?;
    model.metric.backward_into(&met_a, &g_a, &mut grads.metric)?;
    let dh_a = grads.metric.input.clone();
    model.metric.backward_into(&met_b, &g_b, &mut grads.metric)?;
    let dh_b = grads.metric.input.clone();
    model.encoder.backward_into(&enc_a, &dh_a, &mut grads.encoder)?;
    model.encoder.backward_into(&enc_b, &dh_b, &mut grads.encoder)?;
    Ok(loss)
}

/// One shuffled pass over `pairs`, updating encoder and metric head per pair.
/// Returns the mean contrastive loss.
#[allow(clippy::too_many_arguments)]
pub fn train_dml_epoch<R: Rng + ?Sized>(
    model: &mut CaseModel,
    cases: &[&Case],
    pairs: &[PatchPair],
    scale: Scale,
    margin: f64,
    opt: &mut DmlOptimizer,
    rng: &mut R,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("DML epoch without pairs".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut grads = DmlGrads::zeros_like(model);
    let mut total = 0.0;
    for (step, &p) in order.iter().enumerate() {
        let pair = &pairs[p];
        let x_a = cases[pair.a.case].patches[pair.a.patch].features(scale)?;
        let x_b = cases[pair.b.case].patches[pair.b.patch].features(scale)?;
        grads.fill_zero();
        let loss = pair_loss_and_grad(model, x_a, x_b, pair.relevance, margin, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("DML loss {loss} at step {step}")));
        }
        total += loss;
        let ctx = |e: Error| match e {
            Error::Divergence(m) => Error::Divergence(format!("{m} at DML step {step}")),
            other => other,
        };
        sgd_momentum_step(&mut model.metric, &grads.metric, &mut opt.metric).map_err(ctx)?;
        sgd_momentum_step(&mut model.encoder, &grads.encoder, &mut opt.encoder).map_err(ctx)?;
    }
    Ok(total / pairs.len() as f64)
}
