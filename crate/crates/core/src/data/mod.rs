//! Cases, labels, relevance indices, the synthetic case generator,
//! stratified splitting and dataset files.

mod case;
mod ihc;
mod io;
mod split;
mod synth;

pub use case::{Case, Dataset, Patch, Provenance, Scale, ScaleSet};
pub use ihc::{jaccard_relevance, subtype_relevance, IhcPattern, Subtype};
pub use io::{load_dataset, save_dataset, DATASET_FORMAT_VERSION, FEATURES_FILE, MANIFEST_FILE};
pub use split::{stratified_kfold, FoldSplit};
pub use synth::{generate_synthetic_dataset, SynthConfig};
