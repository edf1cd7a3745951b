#![allow(dead_code)]

use lret_core::dml::{pair_loss_and_grad, DmlGrads};
use lret_core::mil::{bag_loss_and_grad, MilGrads};
use lret_core::numcore::{GradSet, ParamSet};
use lret_core::retrieval::{DatabaseEntry, Heatmap, SearchDatabase, StoredPatch, ExtractConfig};
use lret_core::rng::{substream, Rng};
use lret_core::{ArchConfig, CaseModel, Scale, ScaleSet, Subtype};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn small_arch() -> ArchConfig {
    ArchConfig { h_dim: 6, att_dim: 4, clf_hidden: 5, met_hidden: 5, embed_dim: 3 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Encoder,
    Attention,
    Classifier,
    Metric,
}

fn params_mut(m: &mut CaseModel, part: Part) -> &mut dyn ParamSet {
    match part {
        Part::Encoder => &mut m.encoder,
        Part::Attention => &mut m.attention,
        Part::Classifier => &mut m.classifier,
        Part::Metric => &mut m.metric,
    }
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter of `parts`.
#[allow(clippy::needless_range_loop)]
fn max_error(
    model: &CaseModel,
    parts: &[(Part, Vec<Vec<f64>>)],
    loss: &dyn Fn(&CaseModel) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (part, grads) in parts {
        let mut probe = model.clone();
        let n_tensors = grads.len();
        for t in 0..n_tensors {
            for i in 0..grads[t].len() {
                let orig = params_mut(&mut probe, *part).param_tensors_mut()[t][i];
                params_mut(&mut probe, *part).param_tensors_mut()[t][i] = orig + FD_STEP;
                params_mut(&mut probe, *part).mark_mutated();
                let up = loss(&probe);
                params_mut(&mut probe, *part).param_tensors_mut()[t][i] = orig - FD_STEP;
                params_mut(&mut probe, *part).mark_mutated();
                let down = loss(&probe);
                params_mut(&mut probe, *part).param_tensors_mut()[t][i] = orig;
                params_mut(&mut probe, *part).mark_mutated();
                let numeric = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(grads[t][i], numeric));
            }
        }
    }
    worst
}

fn owned(g: &dyn GradSet) -> Vec<Vec<f64>> {
    g.grad_tensors().into_iter().map(<[f64]>::to_vec).collect()
}

fn random_inputs(rng: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

/// Bag cross-entropy through encoder, attention and classifier.
pub fn mil_gradient_error(seed: u64) -> f64 {
    let mut rng = substream(seed, "fd-mil");
    let model = CaseModel::init(Scale::High, 5, 3, &small_arch(), seed).unwrap();
    let n = rng.random_range(1..7);
    let xs = random_inputs(&mut rng, n, 5);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let label = Subtype::new(rng.random_range(0..3), 3).unwrap().onehot();
    let mut grads = MilGrads::zeros_like(&model);
    bag_loss_and_grad(&model, &refs, &label, &mut grads).unwrap();
    let loss = |m: &CaseModel| {
        let mut scratch = MilGrads::zeros_like(m);
        bag_loss_and_grad(m, &refs, &label, &mut scratch).unwrap().loss
    };
    max_error(
        &model,
        &[
            (Part::Encoder, owned(&grads.encoder)),
            (Part::Attention, owned(&grads.attention)),
            (Part::Classifier, owned(&grads.classifier)),
        ],
        &loss,
    )
}

/// Contrastive pair loss through encoder and metric head. Pairs whose
/// embedding distance lies within 1e-3 of 0 or the margin are redrawn.
pub fn dml_gradient_error(seed: u64) -> f64 {
    let mut rng = substream(seed, "fd-dml");
    let model = CaseModel::init(Scale::High, 5, 3, &small_arch(), seed).unwrap();
    let margin = 1.0;
    let (xa, xb) = loop {
        let v = random_inputs(&mut rng, 2, 5);
        let za = model.embed(&v[0]).unwrap();
        let zb = model.embed(&v[1]).unwrap();
        let d = za.iter().zip(&zb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if d > 1e-3 && (d - margin).abs() > 1e-3 {
            break (v[0].clone(), v[1].clone());
        }
    };
    let r = match seed % 3 {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random_range(0.0..1.0),
    };
    let mut grads = DmlGrads::zeros_like(&model);
    pair_loss_and_grad(&model, &xa, &xb, r, margin, &mut grads).unwrap();
    let loss = |m: &CaseModel| {
        let mut scratch = DmlGrads::zeros_like(m);
        pair_loss_and_grad(m, &xa, &xb, r, margin, &mut scratch).unwrap()
    };
    max_error(
        &model,
        &[(Part::Encoder, owned(&grads.encoder)), (Part::Metric, owned(&grads.metric))],
        &loss,
    )
}

/// Random database with `n` cases of up to `max_ha` patches in `dim`
/// dimensions at each scale of `scales`.
pub fn random_database(rng: &mut Rng, n: usize, max_ha: usize, dim: usize, scales: ScaleSet) -> SearchDatabase {
    let n_scales = scales.scales().len();
    let entries = (0..n)
        .map(|c| random_entry(rng, &format!("case-{c:03}"), max_ha, dim, n_scales))
        .collect();
    SearchDatabase {
        fingerprint: "oracle".into(),
        scales,
        embed_dim: dim,
        extract: ExtractConfig::default(),
        k: 2,
        l: 0,
        grid_cols: 1,
        entries,
    }
}

pub fn random_entry(rng: &mut Rng, id: &str, max_ha: usize, dim: usize, n_scales: usize) -> DatabaseEntry {
    let n = rng.random_range(1..=max_ha);
    DatabaseEntry {
        case_id: id.into(),
        subtype: Subtype::new(0, 2).unwrap(),
        ihc: None,
        patches: (0..n as u32)
            .map(|p| {
                StoredPatch::new(
                    p,
                    (0..n_scales)
                        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
                        .collect(),
                )
            })
            .collect(),
        heatmap: Heatmap::empty(),
    }
}

/// Brute-force case distance: for each query patch, the smallest summed
/// per-scale Euclidean distance to any database patch.
pub fn oracle_distance(db: &DatabaseEntry, query: &DatabaseEntry) -> f64 {
    let mut total = 0.0;
    for q in &query.patches {
        let mut best = f64::INFINITY;
        for p in &db.patches {
            let mut d = 0.0;
            for s in 0..q.embeddings.len() {
                let mut sq = 0.0;
                for k in 0..q.embeddings[s].len() {
                    let diff = p.embeddings[s][k] - q.embeddings[s][k];
                    sq += diff * diff;
                }
                d += sq.sqrt();
            }
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total
}

pub fn oracle_ranking(db: &SearchDatabase, query: &DatabaseEntry) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = db
        .entries
        .iter()
        .filter(|e| e.case_id != query.case_id)
        .map(|e| (e.case_id.clone(), oracle_distance(e, query)))
        .collect();
    out.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn scale_embeddings(entry: &mut DatabaseEntry, rho: f64) {
    for p in &mut entry.patches {
        for z in &mut p.embeddings {
            for v in z.iter_mut() {
                *v *= rho;
            }
        }
    }
}
