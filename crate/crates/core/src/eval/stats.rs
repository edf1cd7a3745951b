use rand::{Rng, RngCore};

use crate::rng::substream;
use crate::{Error, Result};

/// Number of heads among `n` fair coins, drawn 64 at a time.
fn coin_heads<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> u32 {
    let mut heads = 0;
    let mut left = n;
    while left >= 64 {
        heads += rng.next_u64().count_ones();
        left -= 64;
    }
    if left > 0 {
        heads += (rng.next_u64() & ((1u64 << left) - 1)).count_ones();
    }
    heads
}

/// One-sided Monte Carlo test of binary outcomes against fair coins:
/// the fraction of `n_draws` resampled vectors whose mean reaches the
/// observed mean, floored at `1 / n_draws`.
pub fn monte_carlo_permutation_test(outcomes: &[bool], n_draws: usize, seed: u64) -> Result<f64> {
    if outcomes.is_empty() || n_draws == 0 {
        return Err(Error::Domain("permutation test needs outcomes and draws".into()));
    }
    let observed = outcomes.iter().filter(|&&o| o).count() as u32;
    let mut rng = substream(seed, "permutation");
    let hits = (0..n_draws)
        .filter(|_| coin_heads(outcomes.len(), &mut rng) >= observed)
        .count();
    Ok(hits.max(1) as f64 / n_draws as f64)
}

/// One-sided paired sign-flip test that the mean of `diffs` is positive.
pub fn paired_permutation_test(diffs: &[f64], n_draws: usize, seed: u64) -> Result<f64> {
    if diffs.is_empty() || n_draws == 0 {
        return Err(Error::Domain("paired test needs differences and draws".into()));
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("non-finite paired difference".into()));
    }
    let observed: f64 = diffs.iter().sum();
    let tol = 1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>();
    let mut rng = substream(seed, "paired-permutation");
    let mut hits = 0usize;
    for _ in 0..n_draws {
        let mut s = 0.0;
        let mut word = 0u64;
        for (i, d) in diffs.iter().enumerate() {
            if i % 64 == 0 {
                word = rng.random();
            }
            s += if (word >> (i % 64)) & 1 == 1 { *d } else { -*d };
        }
        if s >= observed - tol {
            hits += 1;
        }
    }
    Ok(hits.max(1) as f64 / n_draws as f64)
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_hits_resolution_floor() {
        let p = monte_carlo_permutation_test(&[true; 20], 10_000, 1).unwrap();
        assert_eq!(p, 1e-4);
    }

    #[test]
    fn balanced_outcomes_are_null_consistent() {
        let o: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
        let p = monte_carlo_permutation_test(&o, 10_000, 2).unwrap();
        assert!((0.45..0.6).contains(&p), "{p}");
    }

    #[test]
    fn short_words_are_masked() {
        let mut rng = substream(5, "coins");
        let total: u32 = (0..20_000).map(|_| coin_heads(3, &mut rng)).sum();
        assert!((total as f64 / 20_000.0 - 1.5).abs() < 0.03);
        assert!((0..1000).all(|_| coin_heads(3, &mut rng) <= 3));
    }

    #[test]
    fn paired_test_cases() {
        let p = paired_permutation_test(&[0.5; 30], 10_000, 1).unwrap();
        assert_eq!(p, 1e-4);
        let p = paired_permutation_test(&[-0.5; 30], 2_000, 1).unwrap();
        assert_eq!(p, 1.0);
        let p = paired_permutation_test(&[0.0; 10], 100, 1).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn standard_error() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_and_se(&[0.7]), (0.7, 0.0));
    }
}
