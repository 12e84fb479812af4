use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Pairwise cosine dissimilarity `1 − cos` between rows.
///
/// Zero rows are rejected by the callers before this point; here they would yield NaN.
pub fn dissimilarity_matrix(features: ArrayView2<f64>) -> Array2<f64> {
    let n = features.nrows();
    let normalized: Vec<Vec<f64>> = features
        .rows()
        .into_iter()
        .map(|r| {
            let norm = r.dot(&r).sqrt();
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut dist = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let cos: f64 = normalized[i].iter().zip(&normalized[j]).map(|(a, b)| a * b).sum();
            let d = if i == j { 0.0 } else { 1.0 - cos };
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    dist
}

/// Hardest positive: the same-identity peer with the largest dissimilarity,
/// ties to the smallest index.
pub fn mine_hard_positive(dist: ArrayView2<f64>, labels: &[u32], anchor: usize) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (p, &l) in labels.iter().enumerate() {
        if p == anchor || l != labels[anchor] {
            continue;
        }
        let d = dist[[anchor, p]];
        if best.is_none_or(|(_, bd)| d > bd) {
            best = Some((p, d));
        }
    }
    best.map(|(p, _)| p).ok_or(Error::NoPositive(anchor))
}

/// Nearest negative strictly farther than `hardest_pos_dist`; when none
/// exists, the nearest negative overall. Ties go to the smallest index.
pub fn mine_semi_hard_negative(dist: ArrayView2<f64>, labels: &[u32], anchor: usize, hardest_pos_dist: f64) -> Result<usize> {
    let mut semi: Option<(usize, f64)> = None;
    let mut nearest: Option<(usize, f64)> = None;
    for (n, &l) in labels.iter().enumerate() {
        if l == labels[anchor] {
            continue;
        }
        let d = dist[[anchor, n]];
        if nearest.is_none_or(|(_, bd)| d < bd) {
            nearest = Some((n, d));
        }
        if d > hardest_pos_dist && semi.is_none_or(|(_, bd)| d < bd) {
            semi = Some((n, d));
        }
    }
    semi.or(nearest).map(|(n, _)| n).ok_or(Error::NoNegative(anchor))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Mines every anchor; anchors lacking a positive or a negative map to `None`.
pub fn mine_all(dist: ArrayView2<f64>, labels: &[u32]) -> Vec<Option<MinedTriplet>> {
    (0..labels.len())
        .map(|a| {
            let p = mine_hard_positive(dist, labels, a).ok()?;
            let n = mine_semi_hard_negative(dist, labels, a, dist[[a, p]]).ok()?;
            Some(MinedTriplet { anchor: a, positive: p, negative: n })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Distance matrix with prescribed anchor-row entries.
    fn anchor_row(values: &[f64]) -> Array2<f64> {
        let n = values.len();
        let mut d = Array2::zeros((n, n));
        for (j, &v) in values.iter().enumerate() {
            d[[0, j]] = v;
            d[[j, 0]] = v;
        }
        d
    }

    #[test]
    fn hard_positive_examples() {
        let d = anchor_row(&[0.0, 0.4, 0.9]);
        assert_eq!(mine_hard_positive(d.view(), &[0, 0, 1], 0).unwrap(), 1);
        let d = anchor_row(&[0.0, 0.1, 0.3, 0.9]);
        assert_eq!(mine_hard_positive(d.view(), &[0, 0, 0, 1], 0).unwrap(), 2);
        let d = anchor_row(&[0.0, 0.2, 0.2]);
        assert_eq!(mine_hard_positive(d.view(), &[0, 0, 0], 0).unwrap(), 1);
        assert!(matches!(mine_hard_positive(d.view(), &[0, 1, 1], 0), Err(Error::NoPositive(0))));
    }

    #[test]
    fn semi_hard_negative_examples() {
        let d = anchor_row(&[0.0, 0.15, 0.35, 0.5]);
        assert_eq!(mine_semi_hard_negative(d.view(), &[0, 1, 2, 3], 0, 0.3).unwrap(), 2);
        let d = anchor_row(&[0.0, 0.2, 0.1]);
        assert_eq!(mine_semi_hard_negative(d.view(), &[0, 1, 1], 0, 0.3).unwrap(), 2);
        let d = anchor_row(&[0.0, 0.05]);
        assert_eq!(mine_semi_hard_negative(d.view(), &[0, 1], 0, 0.3).unwrap(), 1);
        assert!(matches!(mine_semi_hard_negative(d.view(), &[0, 0], 0, 0.3), Err(Error::NoNegative(0))));
    }

    #[test]
    fn strict_threshold() {
        // A negative exactly at the positive distance is not semi-hard.
        let d = anchor_row(&[0.0, 0.3, 0.6]);
        assert_eq!(mine_semi_hard_negative(d.view(), &[0, 1, 1], 0, 0.3).unwrap(), 2);
    }
}
