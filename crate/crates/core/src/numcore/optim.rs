use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Anything that owns a list of learnable tensors.
pub trait ParamSet {
    fn param_tensors(&self) -> Vec<&[f64]>;
    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Invalidate tapes recorded before a parameter update.
    fn mark_mutated(&mut self);
}

/// Gradients laid out like the tensors of a [`ParamSet`].
pub trait GradSet {
    fn grad_tensors(&self) -> Vec<&[f64]>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    /// Learning rate 1.25e-4, momentum 0.9, weight decay 1e-4.
    pub const STANDARD: SgdConfig = SgdConfig {
        learning_rate: 1.25e-4,
        momentum: 0.9,
        weight_decay: 1e-4,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = [self.learning_rate, self.momentum, self.weight_decay]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Momentum buffers for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub config: SgdConfig,
}

impl OptimizerState {
    pub fn new<P: ParamSet + ?Sized>(params: &P, config: SgdConfig) -> Self {
        Self {
            velocity: params
                .param_tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
            config,
        }
    }
}

/// `v ← μ·v − η·(g + λ·θ)`, `θ ← θ + v`, with weight decay coupled into the
/// gradient.
///
/// A step that produces non-finite parameters still applies but reports
/// divergence.
pub fn sgd_momentum_step<P, G>(params: &mut P, grads: &G, state: &mut OptimizerState) -> Result<()>
where
    P: ParamSet + ?Sized,
    G: GradSet + ?Sized,
{
    let g = grads.grad_tensors();
    {
        let p = params.param_tensors();
        let congruent = p.len() == g.len()
            && p.len() == state.velocity.len()
            && p.iter()
                .zip(&g)
                .zip(&state.velocity)
                .all(|((a, b), v)| a.len() == b.len() && a.len() == v.len());
        if !congruent {
            return Err(Error::Shape("gradient/optimizer state does not match parameters".into()));
        }
    }
    if g.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    let SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay: wd,
    } = state.config;
    for ((theta, grad), vel) in params
        .param_tensors_mut()
        .into_iter()
        .zip(g)
        .zip(state.velocity.iter_mut())
    {
        for ((t, &gi), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
            *v = momentum * *v - lr * (gi + wd * *t);
            *t += *v;
        }
    }
    params.mark_mutated();
    if params.param_tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence("non-finite parameters after update".into()));
    }
    Ok(())
}
