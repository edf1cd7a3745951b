use crate::{Error, Result};

/// Lower clamp applied inside the cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Softmax with max subtraction.
pub fn softmax_stable(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Divergence("softmax of non-finite scores".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Cross-entropy `-Σ Y_k log p_k` and its gradient with respect to the
/// pre-softmax scores (`p - Y`).
pub fn cross_entropy(probs: &[f64], onehot: &[f64]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != onehot.len() || probs.is_empty() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            onehot.len()
        )));
    }
    let loss = -probs
        .iter()
        .zip(onehot)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| y * p.max(LOG_CLAMP).ln())
        .sum::<f64>();
    let grad = probs.iter().zip(onehot).map(|(p, y)| p - y).collect();
    Ok((loss.max(0.0), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_for_equal_scores() {
        let p = softmax_stable(&[2.0; 4]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn large_scores_do_not_overflow() {
        assert_eq!(softmax_stable(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn log_three_ratio() {
        let p = softmax_stable(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_is_domain_error() {
        assert!(matches!(softmax_stable(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_fixtures() {
        let (l, g) = cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0; 3]);

        let third = 1.0 / 3.0;
        let (l, _) = cross_entropy(&[third; 3], &[0.0, 0.0, 1.0]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);

        let (l, g) = cross_entropy(&[0.7, 0.2, 0.1], &[1.0, 0.0, 0.0]).unwrap();
        assert!((l + 0.7f64.ln()).abs() < 1e-15);
        assert!((g[0] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let (l, _) = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((l + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(scores in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let p = softmax_stable(&scores).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        // Integer shifts of small-integer scores are exact in f64, so the
        // max-subtracted exponents and therefore the outputs are identical.
        #[test]
        fn softmax_exact_shift_invariance(
            scores in prop::collection::vec(-20i32..20, 1..20),
            shift in -1000i32..1000,
        ) {
            let a: Vec<f64> = scores.iter().map(|&s| f64::from(s)).collect();
            let b: Vec<f64> = scores.iter().map(|&s| f64::from(s + shift)).collect();
            prop_assert_eq!(softmax_stable(&a).unwrap(), softmax_stable(&b).unwrap());
        }
    }
}
