//! AUC and RMSE.

use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `None` when the labels hold a single class.
    pub auc: Option<f64>,
    pub rmse: f64,
}

/// Mann-Whitney AUC with ties counted one half, via midranks.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] > 0.5 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, q) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn rmse(scores: &[f64], labels: &[f64]) -> f64 {
    let n = scores.len().max(1) as f64;
    let sq: f64 = scores.iter().zip(labels).map(|(s, y)| (s - y) * (s - y)).sum();
    libm::sqrt(sq / n)
}

pub fn evaluate(scores: &[f64], labels: &[f64]) -> Result<Metrics> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "evaluate",
            lhs: (scores.len(), 1),
            rhs: (labels.len(), 1),
        });
    }
    Ok(Metrics {
        auc: auc(scores, labels),
        rmse: rmse(scores, labels),
    })
}
