//! Attention-based multiple-instance learning: bags, attention pooling,
//! bag classification, MIL epochs and high-attention (HA) patch selection.

mod attention;

pub use attention::{AttentionCache, AttentionGrad, AttentionHead};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Case, Scale};
use crate::model::CaseModel;
use crate::numcore::{
    cross_entropy, sgd_momentum_step, softmax_stable, DenseGrad, OptimizerState, SgdConfig, Tape,
};
use crate::{Error, Result};

/// Random subset of one case's patches, classified as a unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bag {
    /// Index of the case in the slice the bag was built from.
    pub case: usize,
    pub case_id: String,
    /// Indices into `Case::patches`.
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagConfig {
    /// Patches drawn per case for MIL training.
    pub q_train: usize,
    pub bag_size: usize,
    pub max_bags: usize,
}

impl Default for BagConfig {
    fn default() -> Self {
        Self {
            q_train: 500,
            bag_size: 50,
            max_bags: 10,
        }
    }
}

impl BagConfig {
    /// 5000 patches in 50 bags of 100.
    pub const FULL_SLIDE: BagConfig = BagConfig {
        q_train: 5000,
        bag_size: 100,
        max_bags: 50,
    };

    pub fn validate(&self) -> Result<()> {
        if self.q_train == 0 || self.bag_size == 0 || self.max_bags == 0 {
            return Err(Error::Config("bag settings must be positive".into()));
        }
        Ok(())
    }
}

/// Samples `min(q, available)` patches without replacement and deals them
/// into at most `max_bags` bags of `bag_size`; the last bag may be short.
pub fn build_bags<R: Rng + ?Sized>(
    case_index: usize,
    case: &Case,
    cfg: &BagConfig,
    rng: &mut R,
) -> Vec<Bag> {
    let available = case.patches.len();
    let wanted = cfg.q_train.min(available).min(cfg.max_bags * cfg.bag_size);
    let chosen = index::sample(rng, available, wanted).into_vec();
    chosen
        .chunks(cfg.bag_size)
        .map(|chunk| Bag {
            case: case_index,
            case_id: case.case_id.clone(),
            patches: chunk.to_vec(),
        })
        .collect()
}

/// Attention-weighted mean `u = Σ a_i h_i`.
pub fn bag_embedding(weights: &[f64], hs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if weights.len() != hs.len() || hs.is_empty() {
        return Err(Error::Shape("weights and features disagree".into()));
    }
    let mut u = vec![0.0; hs[0].len()];
    for (a, h) in weights.iter().zip(hs) {
        if h.len() != u.len() {
            return Err(Error::Shape("ragged bag features".into()));
        }
        for (ui, hi) in u.iter_mut().zip(h) {
            *ui += a * hi;
        }
    }
    Ok(u)
}

/// Subtype probabilities for a pooled bag feature.
pub fn classify_bag(model: &CaseModel, u: &[f64]) -> Result<Vec<f64>> {
    softmax_stable(&model.classifier.predict(u)?)
}

/// Momentum buffers for the three components trained by the MIL phase.
#[derive(Debug, Clone, PartialEq)]
pub struct MilOptimizer {
    pub encoder: OptimizerState,
    pub attention: OptimizerState,
    pub classifier: OptimizerState,
}

impl MilOptimizer {
    pub fn new(model: &CaseModel, cfg: SgdConfig) -> Self {
        Self {
            encoder: OptimizerState::new(&model.encoder, cfg),
            attention: OptimizerState::new(&model.attention, cfg),
            classifier: OptimizerState::new(&model.classifier, cfg),
        }
    }
}

/// Gradients of the bag cross-entropy with respect to encoder, attention and
/// classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MilGrads {
    pub encoder: DenseGrad,
    pub attention: AttentionGrad,
    pub classifier: DenseGrad,
}

impl MilGrads {
    pub fn zeros_like(model: &CaseModel) -> Self {
        Self {
            encoder: DenseGrad::zeros_like(&model.encoder),
            attention: AttentionGrad::zeros_like(&model.attention),
            classifier: DenseGrad::zeros_like(&model.classifier),
        }
    }

    fn fill_zero(&mut self) {
        self.encoder.fill_zero();
        self.attention.fill_zero();
        self.classifier.fill_zero();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagOutcome {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Forward and backward pass of one bag; gradients are added into `grads`.
pub fn bag_loss_and_grad(
    model: &CaseModel,
    xs: &[&[f64]],
    label: &[f64],
    grads: &mut MilGrads,
) -> Result<BagOutcome> {
    let mut tapes: Vec<Tape> = Vec::with_capacity(xs.len());
    let mut hs = Vec::with_capacity(xs.len());
    for x in xs {
        let (h, tape) = model.encoder.forward(x)?;
        hs.push(h);
        tapes.push(tape);
    }
    let cache = model.attention.forward(&hs)?;
    let u = bag_embedding(&cache.weights, &hs)?;
    let (logits, ctape) = model.classifier.forward(&u)?;
    let probs = softmax_stable(&logits)?;
    let (loss, dlogits) = cross_entropy(&probs, label)?;

    model.classifier.backward_into(&ctape, &dlogits, &mut grads.classifier)?;
    let du = grads.classifier.input.clone();
    let mut d_hs: Vec<Vec<f64>> = cache
        .weights
        .iter()
        .map(|&a| du.iter().map(|d| a * d).collect())
        .collect();
    let d_weights: Vec<f64> = hs
        .iter()
        .map(|h| h.iter().zip(&du).map(|(a, b)| a * b).sum())
        .collect();
    model
        .attention
        .backward_into(&cache, &hs, &d_weights, &mut grads.attention, &mut d_hs)?;
    for (tape, dh) in tapes.iter().zip(&d_hs) {
        model.encoder.backward_into(tape, dh, &mut grads.encoder)?;
    }
    Ok(BagOutcome {
        loss,
        probs,
        weights: cache.weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MilEpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// One pass over `bags` in shuffled order with one parameter update per bag.
pub fn train_mil_epoch<R: Rng + ?Sized>(
    model: &mut CaseModel,
    cases: &[&Case],
    bags: &[Bag],
    scale: Scale,
    opt: &mut MilOptimizer,
    rng: &mut R,
) -> Result<MilEpochMetrics> {
    if bags.is_empty() {
        return Err(Error::Domain("MIL epoch without bags".into()));
    }
    let mut order: Vec<usize> = (0..bags.len()).collect();
    order.shuffle(rng);
    let mut grads = MilGrads::zeros_like(model);
    let (mut total, mut correct) = (0.0, 0usize);
    for (step, &b) in order.iter().enumerate() {
        let bag = &bags[b];
        let case = cases
            .get(bag.case)
            .ok_or_else(|| Error::Domain(format!("bag refers to missing case {}", bag.case)))?;
        let xs = bag
            .patches
            .iter()
            .map(|&p| case.patches[p].features(scale))
            .collect::<Result<Vec<_>>>()?;
        let label = case.subtype.onehot();
        grads.fill_zero();
        let out = bag_loss_and_grad(model, &xs, &label, &mut grads)?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence(format!(
                "MIL loss {} at step {step} (bag of case {})",
                out.loss, bag.case_id
            )));
        }
        total += out.loss;
        correct += usize::from(argmax(&out.probs) == case.subtype.class);
        let ctx = |e: Error| match e {
            Error::Divergence(m) => Error::Divergence(format!("{m} at MIL step {step}")),
            other => other,
        };
        sgd_momentum_step(&mut model.classifier, &grads.classifier, &mut opt.classifier).map_err(ctx)?;
        sgd_momentum_step(&mut model.attention, &grads.attention, &mut opt.attention).map_err(ctx)?;
        sgd_momentum_step(&mut model.encoder, &grads.encoder, &mut opt.encoder).map_err(ctx)?;
    }
    Ok(MilEpochMetrics {
        mean_loss: total / bags.len() as f64,
        accuracy: correct as f64 / bags.len() as f64,
    })
}

/// Bag-level classification accuracy without updating anything.
pub fn bag_accuracy(model: &CaseModel, cases: &[&Case], bags: &[Bag], scale: Scale) -> Result<f64> {
    let mut correct = 0usize;
    for bag in bags {
        let case = cases[bag.case];
        let hs = bag
            .patches
            .iter()
            .map(|&p| model.encode(case.patches[p].features(scale)?))
            .collect::<Result<Vec<_>>>()?;
        let u = bag_embedding(&model.attention.weights(&hs)?, &hs)?;
        correct += usize::from(argmax(&classify_bag(model, &u)?) == case.subtype.class);
    }
    Ok(correct as f64 / bags.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaPatch {
    /// Index into `Case::patches`.
    pub patch: usize,
    pub patch_id: u32,
    pub bag: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseHa {
    pub case: usize,
    pub case_id: String,
    pub patches: Vec<HaPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaSelection {
    pub m_fraction: f64,
    pub cases: Vec<CaseHa>,
}

/// Number of patches kept from a set of `n` at fraction `m`.
pub fn top_count(m: f64, n: usize) -> usize {
    ((m * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Positions of the top `ceil(m·n)` weights, ordered by descending weight with
/// ties broken by ascending patch id.
pub fn top_by_weight(weights: &[f64], patch_ids: &[u32], m: f64) -> Vec<usize> {
    top_n_by_weight(weights, patch_ids, top_count(m, weights.len()))
}

/// Positions of the `min(count, n)` largest weights, in the same order as
/// [`top_by_weight`].
pub fn top_n_by_weight(weights: &[f64], patch_ids: &[u32], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then(patch_ids[a].cmp(&patch_ids[b]))
    });
    order.truncate(count.min(weights.len()));
    order
}

pub fn validate_fraction(m: f64) -> Result<()> {
    if !(m > 0.0 && m <= 1.0) {
        return Err(Error::Config(format!("selection fraction {m} outside (0, 1]")));
    }
    Ok(())
}

/// Per-bag top-M selection from precomputed weights; the case-level HA set is
/// the union over the case's bags.
pub fn select_ha_from_weights(
    cases: &[&Case],
    bags: &[Bag],
    weights: &[Vec<f64>],
    m: f64,
) -> Result<HaSelection> {
    validate_fraction(m)?;
    let mut out: Vec<CaseHa> = cases
        .iter()
        .enumerate()
        .map(|(i, c)| CaseHa {
            case: i,
            case_id: c.case_id.clone(),
            patches: Vec::new(),
        })
        .collect();
    for (b, (bag, w)) in bags.iter().zip(weights).enumerate() {
        let case = cases[bag.case];
        let ids: Vec<u32> = bag.patches.iter().map(|&p| case.patches[p].patch_id).collect();
        for pos in top_by_weight(w, &ids, m) {
            out[bag.case].patches.push(HaPatch {
                patch: bag.patches[pos],
                patch_id: ids[pos],
                bag: b,
                weight: w[pos],
            });
        }
    }
    Ok(HaSelection { m_fraction: m, cases: out })
}

/// Attention weights for every bag under the current model.
pub fn bag_weights(model: &CaseModel, cases: &[&Case], bags: &[Bag], scale: Scale) -> Result<Vec<Vec<f64>>> {
    bags.iter()
        .map(|bag| {
            let case = cases[bag.case];
            let xs = bag
                .patches
                .iter()
                .map(|&p| case.patches[p].features(scale))
                .collect::<Result<Vec<_>>>()?;
            model.attention_weights(&xs)
        })
        .collect()
}

pub fn select_ha_patches(
    model: &CaseModel,
    cases: &[&Case],
    bags: &[Bag],
    scale: Scale,
    m: f64,
) -> Result<HaSelection> {
    let w = bag_weights(model, cases, bags, scale)?;
    select_ha_from_weights(cases, bags, &w, m)
}

/// `(a_H + a_L) / 2` for patches sharing a field of view.
pub fn multiscale_attention(a_high: &[f64], a_low: &[f64]) -> Result<Vec<f64>> {
    if a_high.len() != a_low.len() {
        return Err(Error::Alignment(format!(
            "{} high-scale weights vs {} low-scale weights",
            a_high.len(),
            a_low.len()
        )));
    }
    Ok(a_high.iter().zip(a_low).map(|(h, l)| 0.5 * (h + l)).collect())
}

/// Fraction of selected patches flagged as tumor, when flags exist.
pub fn ha_tumor_purity(cases: &[&Case], selection: &HaSelection) -> Option<f64> {
    let (mut tumor, mut total) = (0usize, 0usize);
    for ha in &selection.cases {
        for p in &ha.patches {
            tumor += usize::from(cases[ha.case].patches[p.patch].tumor?);
            total += 1;
        }
    }
    (total > 0).then(|| tumor as f64 / total as f64)
}

/// Tab-separated HA export: `case_id  patch_id  bag_id  attention_weight  scale`.
pub fn render_ha_table(selection: &HaSelection, scale: Scale) -> String {
    let mut out = String::from("case_id\tpatch_id\tbag_id\tattention_weight\tscale\n");
    for ha in &selection.cases {
        for p in &ha.patches {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\n",
                ha.case_id, p.patch_id, p.bag, p.weight, scale
            ));
        }
    }
    out
}
