use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Case;
use crate::model::ScaleModels;
use crate::retrieval::{sampled_attention, ExtractConfig, PatchSelection};
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Tumor fraction among each case's highest-attention patch.
    pub high_purity: f64,
    /// Tumor fraction among each case's lowest-attention patch.
    pub low_purity: f64,
    pub n_cases: usize,
}

/// Purities of the argmax and argmin patches given each case's candidate
/// patches and their weights. Ties go to the earlier candidate.
pub fn validity_from_weights(cases: &[&Case], patches: &[Vec<usize>], weights: &[Vec<f64>]) -> Result<ValidityReport> {
    if cases.is_empty() || cases.len() != patches.len() || cases.len() != weights.len() {
        return Err(Error::Shape("cases, patch sets and weights must align".into()));
    }
    let (mut hi, mut lo) = (0usize, 0usize);
    for ((case, idx), w) in cases.iter().zip(patches).zip(weights) {
        if idx.is_empty() || idx.len() != w.len() {
            return Err(Error::Shape(format!("case {} has mismatched candidates", case.case_id)));
        }
        let mut arg_hi = 0;
        let mut arg_lo = 0;
        for i in 1..w.len() {
            if w[i] > w[arg_hi] {
                arg_hi = i;
            }
            if w[i] < w[arg_lo] {
                arg_lo = i;
            }
        }
        let flag = |i: usize| {
            case.patches[idx[i]]
                .tumor
                .ok_or_else(|| Error::Unsupported(format!("case {} lacks tumor flags", case.case_id)))
        };
        hi += usize::from(flag(arg_hi)?);
        lo += usize::from(flag(arg_lo)?);
    }
    let n = cases.len() as f64;
    Ok(ValidityReport {
        high_purity: hi as f64 / n,
        low_purity: lo as f64 / n,
        n_cases: cases.len(),
    })
}

/// Samples up to `n_cases` cases, weighs `q` sampled patches per case (mean
/// over scales) and compares the tumor rate of the highest- and
/// lowest-attention patch.
pub fn attention_validity_check(
    models: &ScaleModels,
    cases: &[&Case],
    n_cases: usize,
    q: usize,
    seed: u64,
) -> Result<ValidityReport> {
    if let Some(c) = cases.iter().find(|c| c.patches.iter().any(|p| p.tumor.is_none())) {
        return Err(Error::Unsupported(format!("case {} lacks tumor flags", c.case_id)));
    }
    let mut rng = substream(seed, "validity-cases");
    let mut chosen = index::sample(&mut rng, cases.len(), n_cases.min(cases.len())).into_vec();
    chosen.sort_unstable();
    let picked: Vec<&Case> = chosen.iter().map(|&i| cases[i]).collect();
    let cfg = ExtractConfig {
        q_test: q,
        selection: PatchSelection::Attention,
        ..ExtractConfig::default()
    };
    let mut patches = Vec::with_capacity(picked.len());
    let mut weights = Vec::with_capacity(picked.len());
    for c in &picked {
        let (idx, w, _) = sampled_attention(models, c, &cfg, seed)?;
        patches.push(idx);
        weights.push(w);
    }
    validity_from_weights(&picked, &patches, &weights)
}
