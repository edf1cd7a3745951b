//! Synthetic weakly labelled cases.
//!
//! Each case is a bag of patch feature vectors. Normal patches scatter around
//! one shared center; tumor patches scatter around a center that depends on
//! the subtype and on the stains present in the case, so only tumor patches
//! carry subtype and staining signal. Half of the feature dimensions (by
//! default) are pure nuisance noise with a larger spread.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Case, Dataset, IhcPattern, Patch, Provenance, Scale, ScaleSet, Subtype};
use crate::rng::{substream, substream_indexed};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub k: usize,
    pub l: usize,
    pub patches_per_case: usize,
    pub feature_dim: usize,
    pub tumor_fraction: f64,
    /// One staining template per subtype; drawn from the seed when absent.
    pub templates: Option<Vec<IhcPattern>>,
    pub stains_per_template: usize,
    /// Independent per-bit flip probability applied to the template.
    pub flip_prob: f64,
    /// Norm of each subtype's tumor center offset.
    pub subtype_separation: f64,
    /// Center shift contributed by each present stain.
    pub stain_effect: f64,
    pub noise_scale: f64,
    /// Spread multiplier on the nuisance dimensions.
    pub nuisance_scale: f64,
    /// Leading dimensions that carry the centers; the rest are nuisance.
    pub signal_dims: usize,
    /// Noise multiplier for the low-magnification view.
    pub low_noise_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 60,
            k: 3,
            l: 26,
            patches_per_case: 500,
            feature_dim: 32,
            tumor_fraction: 0.3,
            templates: None,
            stains_per_template: 7,
            flip_prob: 0.08,
            subtype_separation: 3.0,
            stain_effect: 1.0,
            noise_scale: 0.6,
            nuisance_scale: 2.5,
            signal_dims: 16,
            low_noise_ratio: 0.8,
            seed: 20_240_601,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_cases == 0 || self.k < 2 || self.l == 0 || self.patches_per_case == 0 || self.feature_dim == 0 {
            return fail("case count, L, patch count and feature dim must be positive; K >= 2".into());
        }
        if !(self.tumor_fraction > 0.0 && self.tumor_fraction < 1.0) {
            return fail(format!(
                "tumor_fraction must lie strictly inside (0, 1), got {}",
                self.tumor_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if self.signal_dims == 0 || self.signal_dims > self.feature_dim {
            return fail(format!("signal_dims must be in 1..={}", self.feature_dim));
        }
        if self.stains_per_template == 0 || self.stains_per_template > self.l {
            return fail(format!("stains_per_template must be in 1..={}", self.l));
        }
        let scales = [
            self.subtype_separation,
            self.stain_effect,
            self.noise_scale,
            self.nuisance_scale,
            self.low_noise_ratio,
        ];
        if scales.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("scales must be finite and nonnegative".into());
        }
        if let Some(t) = &self.templates {
            if t.len() != self.k || t.iter().any(|p| p.len() != self.l || p.count_ones() == 0) {
                return fail(format!("need {} nonempty templates of length {}", self.k, self.l));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

const MAX_REDRAWS: usize = 1000;

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let sd = cfg.signal_dims;
    let mut rs = substream(cfg.seed, "synth-structure");

    let templates = match &cfg.templates {
        Some(t) => t.clone(),
        None => (0..cfg.k)
            .map(|_| {
                let mut idx: Vec<usize> = (0..cfg.l).collect();
                idx.shuffle(&mut rs);
                IhcPattern::from_indices(cfg.l, &idx[..cfg.stains_per_template])
            })
            .collect(),
    };
    let class_centers: Vec<Vec<f64>> = (0..cfg.k)
        .map(|_| {
            let v = gaussian_vec(&mut rs, sd, 1.0);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| x * cfg.subtype_separation / norm).collect()
        })
        .collect();
    let stain_dirs: Vec<Vec<f64>> = (0..cfg.l)
        .map(|_| gaussian_vec(&mut rs, sd, cfg.stain_effect / (sd as f64).sqrt()))
        .collect();

    let mut classes: Vec<usize> = (0..cfg.n_cases).map(|i| i % cfg.k).collect();
    classes.shuffle(&mut substream(cfg.seed, "synth-subtypes"));

    let noise_sd: Vec<f64> = (0..cfg.feature_dim)
        .map(|d| cfg.noise_scale * if d < sd { 1.0 } else { cfg.nuisance_scale })
        .collect();

    let cases = classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let mut rng = substream_indexed(cfg.seed, "synth-case", i as u64);
            let ihc = (0..MAX_REDRAWS)
                .map(|_| {
                    let bits: Vec<bool> = templates[class]
                        .bits()
                        .iter()
                        .map(|&b| b ^ rng.random_bool(cfg.flip_prob))
                        .collect();
                    IhcPattern::new(bits)
                })
                .find(|p| p.count_ones() > 0)
                .ok_or_else(|| {
                    Error::Config(format!("template {class} keeps flipping to an empty pattern"))
                })?;
            let mut tumor_center = vec![0.0; cfg.feature_dim];
            for (t, c) in tumor_center.iter_mut().zip(&class_centers[class]) {
                *t += c;
            }
            for (l, _) in ihc.bits().iter().enumerate().filter(|(_, &b)| b) {
                for (t, d) in tumor_center.iter_mut().zip(&stain_dirs[l]) {
                    *t += d;
                }
            }
            let normal_center = vec![0.0; cfg.feature_dim];
            let patches = (0..cfg.patches_per_case)
                .map(|p| {
                    let tumor = rng.random_bool(cfg.tumor_fraction);
                    let latent = if tumor { &tumor_center } else { &normal_center };
                    let high: Vec<f64> = latent
                        .iter()
                        .zip(&noise_sd)
                        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let low: Vec<f64> = latent
                        .iter()
                        .zip(&noise_sd)
                        .map(|(m, s)| m + cfg.low_noise_ratio * s * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Patch::new(p as u32, p as u32, Some(tumor))
                        .with_features(Scale::High, high)
                        .with_features(Scale::Low, low)
                })
                .collect();
            Ok(Case {
                case_id: format!("case-{i:04}"),
                subtype: Subtype::new(class, cfg.k)?,
                ihc: Some(ihc),
                patches,
                split_tag: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let grid_cols = (cfg.patches_per_case as f64).sqrt().ceil() as u32;
    Ok(Dataset {
        k: cfg.k,
        l: cfg.l,
        feature_dim: cfg.feature_dim,
        scales: ScaleSet::Hl,
        grid_cols,
        provenance: Provenance {
            generator: "synthetic-v1".into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
        },
        cases,
    })
}
