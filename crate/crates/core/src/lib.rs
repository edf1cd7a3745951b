//! Case-based similar-image retrieval for whole-slide histopathology.
//!
//! Attention MIL picks diagnostically relevant patches, a contrastive metric
//! head embeds them so that cases with similar IHC staining sit close, and a
//! chamfer-style case distance ranks database cases for a query.

pub mod data;
pub mod dml;
pub mod eval;
pub mod mil;
pub mod model;
pub mod numcore;
pub mod retrieval;
pub mod rng;

mod error;

pub use data::{Case, Dataset, IhcPattern, Patch, Scale, ScaleSet, Subtype};
pub use error::{Error, Result};
pub use model::{ArchConfig, CaseModel, ScaleModels};
