use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{IhcPattern, Subtype};
use crate::{Error, Result};

/// Magnification of a patch view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "H")]
    High,
    #[serde(rename = "L")]
    Low,
}

impl Scale {
    pub fn index(self) -> usize {
        match self {
            Scale::High => 0,
            Scale::Low => 1,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Scale::High => b'H',
            Scale::Low => b'L',
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            b'H' => Some(Scale::High),
            b'L' => Some(Scale::Low),
            _ => None,
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::High => "H",
            Scale::Low => "L",
        })
    }
}

/// Which magnifications take part in a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleSet {
    H,
    L,
    Hl,
}

impl ScaleSet {
    pub fn scales(self) -> &'static [Scale] {
        match self {
            ScaleSet::H => &[Scale::High],
            ScaleSet::L => &[Scale::Low],
            ScaleSet::Hl => &[Scale::High, Scale::Low],
        }
    }

    pub fn contains(self, scale: Scale) -> bool {
        self.scales().contains(&scale)
    }

    pub fn label(self) -> &'static str {
        match self {
            ScaleSet::H => "H",
            ScaleSet::L => "L",
            ScaleSet::Hl => "H&L",
        }
    }
}

impl fmt::Display for ScaleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleSet::H => "h",
            ScaleSet::L => "l",
            ScaleSet::Hl => "hl",
        })
    }
}

impl FromStr for ScaleSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h" => Ok(ScaleSet::H),
            "l" => Ok(ScaleSet::L),
            "hl" | "h&l" => Ok(ScaleSet::Hl),
            other => Err(Error::Config(format!("unknown scale selection {other:?}"))),
        }
    }
}

/// Feature-vector surrogate of one image patch, with one view per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub patch_id: u32,
    pub position: u32,
    pub tumor: Option<bool>,
    features: [Option<Vec<f64>>; 2],
}

impl Patch {
    pub fn new(patch_id: u32, position: u32, tumor: Option<bool>) -> Self {
        Self {
            patch_id,
            position,
            tumor,
            features: [None, None],
        }
    }

    pub fn with_features(mut self, scale: Scale, features: Vec<f64>) -> Self {
        self.features[scale.index()] = Some(features);
        self
    }

    pub fn set_features(&mut self, scale: Scale, features: Vec<f64>) {
        self.features[scale.index()] = Some(features);
    }

    pub fn features(&self, scale: Scale) -> Result<&[f64]> {
        self.features[scale.index()]
            .as_deref()
            .ok_or_else(|| Error::Alignment(format!("patch {} has no {scale} view", self.patch_id)))
    }

    pub fn has_scale(&self, scale: Scale) -> bool {
        self.features[scale.index()].is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub case_id: String,
    pub subtype: Subtype,
    /// Absent when only subtype labels are known.
    pub ihc: Option<IhcPattern>,
    pub patches: Vec<Patch>,
    pub split_tag: Option<String>,
}

impl Case {
    pub fn validate(&self, scales: ScaleSet, feature_dim: usize) -> Result<()> {
        if self.patches.is_empty() {
            return Err(Error::Domain(format!("case {} has no patches", self.case_id)));
        }
        let mut seen = HashSet::with_capacity(self.patches.len());
        for p in &self.patches {
            if !seen.insert(p.patch_id) {
                return Err(Error::Domain(format!(
                    "case {} repeats patch id {}",
                    self.case_id, p.patch_id
                )));
            }
            for &s in scales.scales() {
                let f = p.features(s)?;
                if f.len() != feature_dim {
                    return Err(Error::Shape(format!(
                        "case {} patch {} {s} view has {} features, expected {feature_dim}",
                        self.case_id,
                        p.patch_id,
                        f.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn ihc(&self) -> Result<&IhcPattern> {
        self.ihc
            .as_ref()
            .ok_or_else(|| Error::Unsupported(format!("case {} has no staining pattern", self.case_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Number of subtypes.
    pub k: usize,
    /// Stain lexicon length.
    pub l: usize,
    pub feature_dim: usize,
    pub scales: ScaleSet,
    /// Width of the position grid used for heatmaps.
    pub grid_cols: u32,
    pub provenance: Provenance,
    pub cases: Vec<Case>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for c in &self.cases {
            if !ids.insert(c.case_id.as_str()) {
                return Err(Error::Domain(format!("duplicate case id {}", c.case_id)));
            }
            if c.subtype.k != self.k {
                return Err(Error::Shape(format!(
                    "case {} subtype has k={}, dataset k={}",
                    c.case_id, c.subtype.k, self.k
                )));
            }
            if let Some(ihc) = &c.ihc {
                if ihc.len() != self.l {
                    return Err(Error::Shape(format!(
                        "case {} staining pattern has length {}, dataset L={}",
                        c.case_id,
                        ihc.len(),
                        self.l
                    )));
                }
            }
            c.validate(self.scales, self.feature_dim)?;
        }
        Ok(())
    }

    pub fn case_by_id(&self, id: &str) -> Option<&Case> {
        self.cases.iter().find(|c| c.case_id == id)
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<&Case> {
        indices.iter().map(|&i| &self.cases[i]).collect()
    }
}
