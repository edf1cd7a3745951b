//! The four learnable components of one magnification: encoder, attention
//! head, subtype classifier and metric head. The encoder is a single
//! parameter store read by both the MIL and the metric paths.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Scale, ScaleSet};
use crate::mil::AttentionHead;
use crate::numcore::{Activation, Checkpoint, Component, DenseNet};
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub h_dim: usize,
    pub att_dim: usize,
    pub clf_hidden: usize,
    pub met_hidden: usize,
    pub embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            h_dim: 64,
            att_dim: 64,
            clf_hidden: 64,
            met_hidden: 64,
            embed_dim: 64,
        }
    }
}

impl ArchConfig {
    /// Widths of the original three-layer heads (512 hidden units); the
    /// encoder output stays at desk size.
    pub fn wide() -> Self {
        Self {
            att_dim: 512,
            clf_hidden: 512,
            met_hidden: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.h_dim, self.att_dim, self.clf_hidden, self.met_hidden, self.embed_dim].contains(&0) {
            return Err(Error::Config("architecture widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseModel {
    pub scale: Scale,
    pub encoder: DenseNet,
    pub attention: AttentionHead,
    pub classifier: DenseNet,
    pub metric: DenseNet,
}

impl CaseModel {
    /// Seeded Glorot initialisation; each component draws from its own
    /// substream.
    pub fn init(scale: Scale, feature_dim: usize, k: usize, arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let stream = |c: Component| substream(seed, &format!("init/{scale}/{c}"));
        Ok(Self {
            scale,
            encoder: DenseNet::init(
                &[feature_dim, arch.h_dim],
                &[Activation::Tanh],
                &mut stream(Component::Enc),
            )?,
            attention: AttentionHead::init(arch.h_dim, arch.att_dim, &mut stream(Component::Att))?,
            classifier: DenseNet::init(
                &[arch.h_dim, arch.clf_hidden, k],
                &[Activation::Relu, Activation::Identity],
                &mut stream(Component::Clf),
            )?,
            metric: DenseNet::init(
                &[arch.h_dim, arch.met_hidden, arch.embed_dim],
                &[Activation::Relu, Activation::Identity],
                &mut stream(Component::Met),
            )?,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.metric.output_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(x)
    }

    /// `z = f_met(f_enc(x))`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.metric.predict(&self.encoder.predict(x)?)
    }

    /// Attention weights over one set of patch features, normalised over the
    /// whole set.
    pub fn attention_weights(&self, xs: &[&[f64]]) -> Result<Vec<f64>> {
        let hs = xs.iter().map(|x| self.encode(x)).collect::<Result<Vec<_>>>()?;
        self.attention.weights(&hs)
    }

    pub fn checkpoint(&self, component: Component) -> Checkpoint {
        match component {
            Component::Enc => Checkpoint::from_dense(&self.encoder, self.scale, component),
            Component::Clf => Checkpoint::from_dense(&self.classifier, self.scale, component),
            Component::Met => Checkpoint::from_dense(&self.metric, self.scale, component),
            Component::Att => attention_checkpoint(&self.attention, self.scale),
        }
    }

    pub fn from_checkpoints(scale: Scale, ckpts: &[Checkpoint; 4]) -> Result<Self> {
        for (c, expect) in ckpts.iter().zip(Component::ALL) {
            if c.component != expect || c.scale != scale {
                return Err(Error::Incompatible(format!(
                    "expected {scale}/{expect} checkpoint, found {}/{}",
                    c.scale, c.component
                )));
            }
        }
        let model = Self {
            scale,
            encoder: ckpts[0].to_dense()?,
            attention: attention_from_checkpoint(&ckpts[1])?,
            classifier: ckpts[2].to_dense()?,
            metric: ckpts[3].to_dense()?,
        };
        let h = model.encoder.output_dim();
        if model.attention.h_dim() != h || model.classifier.input_dim() != h || model.metric.input_dim() != h {
            return Err(Error::Incompatible("component widths do not chain".into()));
        }
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in Component::ALL {
            let path = dir.join(format!("{c}.ckpt"));
            fs::write(&path, self.checkpoint(c).to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, scale: Scale) -> Result<Self> {
        let read = |c: Component| -> Result<Checkpoint> {
            let path = dir.join(format!("{c}.ckpt"));
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Checkpoint::from_bytes(&bytes)
        };
        let ckpts = [
            read(Component::Enc)?,
            read(Component::Att)?,
            read(Component::Clf)?,
            read(Component::Met)?,
        ];
        Self::from_checkpoints(scale, &ckpts)
    }
}

pub(crate) fn attention_checkpoint(head: &AttentionHead, scale: Scale) -> Checkpoint {
    use crate::numcore::ArrayBlock;
    Checkpoint {
        scale,
        component: Component::Att,
        activations: Vec::new(),
        arrays: vec![
            ArrayBlock {
                rows: head.att_dim(),
                cols: head.h_dim(),
                data: head.v.clone(),
            },
            ArrayBlock {
                rows: head.att_dim(),
                cols: 1,
                data: head.w.clone(),
            },
        ],
    }
}

fn attention_from_checkpoint(c: &Checkpoint) -> Result<AttentionHead> {
    match c.arrays.as_slice() {
        [v, w] if w.cols == 1 && v.rows == w.rows => AttentionHead::new(v.data.clone(), w.data.clone(), v.cols),
        _ => Err(Error::Malformed("attention checkpoint needs V and w".into())),
    }
}

/// Trained models for every active magnification.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModels {
    pub scales: ScaleSet,
    models: Vec<CaseModel>,
}

impl ScaleModels {
    pub fn new(scales: ScaleSet, models: Vec<CaseModel>) -> Result<Self> {
        let got: Vec<Scale> = models.iter().map(|m| m.scale).collect();
        if got != scales.scales() {
            return Err(Error::Alignment(format!("models for {got:?} do not match {scales}")));
        }
        let dims: Vec<(usize, usize)> = models.iter().map(|m| (m.feature_dim(), m.embed_dim())).collect();
        if dims.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Incompatible("per-scale models disagree on dimensions".into()));
        }
        Ok(Self { scales, models })
    }

    pub fn models(&self) -> &[CaseModel] {
        &self.models
    }

    pub fn get(&self, scale: Scale) -> Option<&CaseModel> {
        self.models.iter().find(|m| m.scale == scale)
    }

    /// Restrict to a subset of the trained scales.
    pub fn select(&self, scales: ScaleSet) -> Result<Self> {
        let models = scales
            .scales()
            .iter()
            .map(|&s| {
                self.get(s)
                    .cloned()
                    .ok_or_else(|| Error::Incompatible(format!("no model trained for scale {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales, models)
    }

    /// SHA-256 over every checkpoint, truncated to 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.models {
            for c in Component::ALL {
                h.update(m.checkpoint(c).to_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for m in &self.models {
            m.save(&dir.join(m.scale.to_string()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, scales: ScaleSet) -> Result<Self> {
        let models = scales
            .scales()
            .iter()
            .map(|&s| CaseModel::load(&dir.join(s.to_string()), s))
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales, models)
    }
}
