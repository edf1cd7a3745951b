//! Seeded fixtures shared by the kernel benchmarks.

use lret_core::numcore::{Activation, DenseNet};
use lret_core::retrieval::StoredPatch;
use lret_core::rng::{substream, Rng};
use rand::Rng as _;

/// A case's stored HA set: `n` patches with one `dim`-wide embedding each.
pub fn stored_patches(seed: u64, label: &str, n: usize, dim: usize) -> Vec<StoredPatch> {
    let mut rng: Rng = substream(seed, label);
    (0..n as u32)
        .map(|id| {
            let e: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            StoredPatch::new(id, vec![e])
        })
        .collect()
}

/// A ReLU MLP with the given widths.
pub fn mlp(seed: u64, dims: &[usize]) -> DenseNet {
    let mut rng: Rng = substream(seed, "mlp");
    let mut acts = vec![Activation::Relu; dims.len() - 1];
    *acts.last_mut().expect("at least one layer") = Activation::Identity;
    DenseNet::init(dims, &acts, &mut rng).expect("valid widths")
}

pub fn input(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng: Rng = substream(seed, "input");
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}
