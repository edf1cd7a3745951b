//! Small deterministic compute kernel: dense layers with analytic backward
//! passes, stable softmax, cross-entropy, SGD with momentum and the binary
//! parameter checkpoint format.

mod checkpoint;
mod dense;
mod ops;
mod optim;

pub use checkpoint::{ArrayBlock, Checkpoint, Component, CHECKPOINT_MAGIC};
pub use dense::{Activation, DenseGrad, DenseLayer, DenseNet, LayerGrad, Tape};
pub use ops::{cross_entropy, softmax_stable, LOG_CLAMP};
pub use optim::{sgd_momentum_step, GradSet, OptimizerState, ParamSet, SgdConfig};

use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Unique identity for a parameter store, used to detect stale tapes.
pub(crate) fn next_param_id() -> u64 {
    NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)
}

/// Glorot-uniform initialisation bound.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
