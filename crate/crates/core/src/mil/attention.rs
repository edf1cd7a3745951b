use rand::Rng;

use crate::numcore::{glorot_bound, next_param_id, softmax_stable, GradSet, ParamSet};
use crate::{Error, Result};

/// Gated-tanh attention `a_i = softmax_i(wᵀ tanh(V h_i))`.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    /// Row-major `att_dim × h_dim`.
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    att_dim: usize,
    h_dim: usize,
    id: u64,
    version: u64,
}

impl PartialEq for AttentionHead {
    fn eq(&self, other: &Self) -> bool {
        self.att_dim == other.att_dim && self.h_dim == other.h_dim && self.v == other.v && self.w == other.w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrad {
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

impl AttentionGrad {
    pub fn zeros_like(head: &AttentionHead) -> Self {
        Self {
            v: vec![0.0; head.v.len()],
            w: vec![0.0; head.w.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.v.fill(0.0);
        self.w.fill(0.0);
    }
}

impl GradSet for AttentionGrad {
    fn grad_tensors(&self) -> Vec<&[f64]> {
        vec![&self.v, &self.w]
    }
}

/// Intermediate values of one bag's attention pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    id: u64,
    version: u64,
    gates: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl AttentionHead {
    pub fn new(v: Vec<f64>, w: Vec<f64>, h_dim: usize) -> Result<Self> {
        let att_dim = w.len();
        if att_dim == 0 || h_dim == 0 || v.len() != att_dim * h_dim {
            return Err(Error::Shape(format!(
                "attention V has {} entries for {att_dim}x{h_dim}",
                v.len()
            )));
        }
        if v.iter().chain(&w).any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite attention parameter".into()));
        }
        Ok(Self {
            v,
            w,
            att_dim,
            h_dim,
            id: next_param_id(),
            version: 0,
        })
    }

    pub fn init<R: Rng + ?Sized>(h_dim: usize, att_dim: usize, rng: &mut R) -> Result<Self> {
        let bv = glorot_bound(h_dim, att_dim);
        let v = (0..att_dim * h_dim).map(|_| rng.random_range(-bv..=bv)).collect();
        let bw = glorot_bound(att_dim, 1);
        let w = (0..att_dim).map(|_| rng.random_range(-bw..=bw)).collect();
        Self::new(v, w, h_dim)
    }

    pub fn att_dim(&self) -> usize {
        self.att_dim
    }

    pub fn h_dim(&self) -> usize {
        self.h_dim
    }

    fn gate(&self, h: &[f64]) -> Vec<f64> {
        self.v
            .chunks_exact(self.h_dim)
            .map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect()
    }

    fn check(&self, hs: &[Vec<f64>]) -> Result<()> {
        if hs.is_empty() {
            return Err(Error::Domain("attention over an empty bag".into()));
        }
        if let Some(h) = hs.iter().find(|h| h.len() != self.h_dim) {
            return Err(Error::Shape(format!(
                "feature has {} entries, attention expects {}",
                h.len(),
                self.h_dim
            )));
        }
        Ok(())
    }

    /// Pre-softmax scores `wᵀ tanh(V h_i)`.
    pub fn scores(&self, hs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check(hs)?;
        Ok(hs
            .iter()
            .map(|h| self.gate(h).iter().zip(&self.w).map(|(g, w)| g * w).sum())
            .collect())
    }

    pub fn weights(&self, hs: &[Vec<f64>]) -> Result<Vec<f64>> {
        softmax_stable(&self.scores(hs)?)
    }

    pub fn forward(&self, hs: &[Vec<f64>]) -> Result<AttentionCache> {
        self.check(hs)?;
        let gates: Vec<Vec<f64>> = hs.iter().map(|h| self.gate(h)).collect();
        let scores: Vec<f64> = gates
            .iter()
            .map(|g| g.iter().zip(&self.w).map(|(a, b)| a * b).sum())
            .collect();
        Ok(AttentionCache {
            id: self.id,
            version: self.version,
            gates,
            weights: softmax_stable(&scores)?,
        })
    }

    /// Accumulates parameter gradients into `grad` and adds the gradient with
    /// respect to each `h_i` into `d_hs`, given `d_weights = ∂L/∂a`.
    pub fn backward_into(
        &self,
        cache: &AttentionCache,
        hs: &[Vec<f64>],
        d_weights: &[f64],
        grad: &mut AttentionGrad,
        d_hs: &mut [Vec<f64>],
    ) -> Result<()> {
        if cache.id != self.id || cache.version != self.version {
            return Err(Error::StaleTape);
        }
        let n = cache.weights.len();
        if hs.len() != n || d_weights.len() != n || d_hs.len() != n {
            return Err(Error::Shape("attention backward inputs disagree on bag size".into()));
        }
        let a = &cache.weights;
        let mean: f64 = a.iter().zip(d_weights).map(|(x, d)| x * d).sum();
        let mut dpre = vec![0.0; self.att_dim];
        for i in 0..n {
            let ds = a[i] * (d_weights[i] - mean);
            if ds == 0.0 {
                continue;
            }
            let gate = &cache.gates[i];
            for (k, (&g, &w)) in gate.iter().zip(&self.w).enumerate() {
                grad.w[k] += ds * g;
                dpre[k] = ds * w * (1.0 - g * g);
            }
            let h = &hs[i];
            let dh = &mut d_hs[i];
            for (k, row) in self.v.chunks_exact(self.h_dim).enumerate() {
                let d = dpre[k];
                let grow = &mut grad.v[k * self.h_dim..(k + 1) * self.h_dim];
                for j in 0..self.h_dim {
                    grow[j] += d * h[j];
                    dh[j] += d * row[j];
                }
            }
        }
        Ok(())
    }
}

impl ParamSet for AttentionHead {
    fn param_tensors(&self) -> Vec<&[f64]> {
        vec![&self.v, &self.w]
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.v, &mut self.w]
    }

    fn mark_mutated(&mut self) {
        self.version += 1;
    }
}

#[cfg(test)]
// Oracles spell out the index arithmetic on purpose.
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::rng::substream_indexed;
    use rand_distr::{Distribution, StandardNormal};

    fn random_bag(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = substream_indexed(seed, "att-bag", 0);
        (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn identical_features_give_uniform_weights() {
        let head = AttentionHead::init(4, 8, &mut substream_indexed(1, "att", 0)).unwrap();
        let hs = vec![vec![0.3, -0.2, 1.0, 0.5]; 5];
        let a = head.weights(&hs).unwrap();
        assert!(a.iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn singleton_bag() {
        let head = AttentionHead::init(3, 5, &mut substream_indexed(2, "att", 0)).unwrap();
        assert_eq!(head.weights(&[vec![1.0, 2.0, 3.0]]).unwrap(), vec![1.0]);
    }

    #[test]
    fn matches_two_step_oracle() {
        let head = AttentionHead::init(6, 7, &mut substream_indexed(3, "att", 0)).unwrap();
        let hs = random_bag(3, 9, 6);
        let a = head.weights(&hs).unwrap();
        // scores by explicit index loops, then exp/normalise
        let mut s = vec![0.0; hs.len()];
        for (i, h) in hs.iter().enumerate() {
            for k in 0..7 {
                let mut pre = 0.0;
                for j in 0..6 {
                    pre += head.v[k * 6 + j] * h[j];
                }
                s[i] += head.w[k] * pre.tanh();
            }
        }
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        for (ai, si) in a.iter().zip(&s) {
            assert!((ai - si.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_bag_rejected() {
        let head = AttentionHead::init(3, 5, &mut substream_indexed(2, "att", 0)).unwrap();
        assert!(head.weights(&[]).is_err());
    }
}
