use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Average precision from the 1-based ranks of the relevant items (ascending).
pub fn average_precision(relevant_ranks: &[usize]) -> f64 {
    if relevant_ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = relevant_ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum();
    sum / relevant_ranks.len() as f64
}

/// Inverse negative penalty `|relevant| / rank of the hardest relevant item`.
pub fn inverse_negative_penalty(relevant_ranks: &[usize]) -> f64 {
    match relevant_ranks.last() {
        Some(&last) => relevant_ranks.len() as f64 / last as f64,
        None => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReidMetrics {
    pub queries: usize,
    /// Rank-k hit rate per requested k.
    pub rank_k: BTreeMap<usize, f64>,
    pub map: f64,
    pub minp: f64,
}

impl ReidMetrics {
    pub fn rank1(&self) -> f64 {
        self.rank_k.get(&1).copied().unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[2]), 0.5);
        assert_eq!(average_precision(&[1, 2, 3]), 1.0);
        assert!((average_precision(&[1, 3]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn inp_single_relevant_is_reciprocal_rank() {
        for r in 1..20 {
            assert_eq!(inverse_negative_penalty(&[r]), 1.0 / r as f64);
        }
        assert_eq!(inverse_negative_penalty(&[1, 2, 4]), 0.75);
    }
}
