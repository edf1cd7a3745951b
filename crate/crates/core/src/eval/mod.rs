//! Retrieval accuracy metrics, permutation tests, the attention-validity
//! check and the cross-validated method benchmark.

mod benchmark;
mod stats;
mod validity;

pub use benchmark::{
    cross_validated_benchmark, BenchmarkConfig, BenchmarkOutcome, BenchmarkReport, Comparison, Method,
    QueryRecord, ReportRow, TrainingRun,
};
pub use stats::{mean_and_se, monte_carlo_permutation_test, paired_permutation_test};
pub use validity::{attention_validity_check, validity_from_weights, ValidityReport};

use crate::data::{jaccard_relevance, IhcPattern, Subtype};
use crate::{Error, Result};

fn check_k(k: usize, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::RetrievalInput("empty ranking".into()));
    }
    if k == 0 || k > len {
        return Err(Error::Domain(format!("top-{k} of a ranking of length {len}")));
    }
    Ok(())
}

/// Mean Jaccard index between the query and each of the top `k` cases.
pub fn ihc_staining_accuracy(query: &IhcPattern, retrieved: &[&IhcPattern], k: usize) -> Result<f64> {
    check_k(k, retrieved.len())?;
    let sum = retrieved[..k]
        .iter()
        .map(|r| jaccard_relevance(query, r))
        .sum::<Result<f64>>()?;
    Ok(sum / k as f64)
}

/// Fraction of the top `k` cases sharing the query's subtype.
pub fn subtype_accuracy(query: &Subtype, retrieved: &[&Subtype], k: usize) -> Result<f64> {
    check_k(k, retrieved.len())?;
    let hits = retrieved[..k].iter().filter(|s| s.class == query.class).count();
    Ok(hits as f64 / k as f64)
}

/// Mean of the `k` largest Jaccard indices between the query and any
/// database case; fewer cases than `k` average over all of them.
pub fn upper_bound_accuracy(query: &IhcPattern, database: &[&IhcPattern], k: usize) -> Result<f64> {
    if database.is_empty() || k == 0 {
        return Err(Error::RetrievalInput("upper bound over an empty database".into()));
    }
    let mut j = database
        .iter()
        .map(|d| jaccard_relevance(query, d))
        .collect::<Result<Vec<_>>>()?;
    j.sort_by(|a, b| b.total_cmp(a));
    let k = k.min(j.len());
    Ok(j[..k].iter().sum::<f64>() / k as f64)
}
