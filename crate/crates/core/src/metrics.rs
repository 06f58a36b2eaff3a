//! Classification metrics: accuracy, rank-statistic AUC and macro F1.

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// Missing when the labels contain a single class.
    pub auc: Option<f64>,
    pub f1: f64,
}

/// Mann-Whitney AUC of `scores` for separating `positive` from the rest;
/// ties count one half. `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tied groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|p| **p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Metrics from predicted labels, per-class scores (one row per sample) and
/// true labels. Binary AUC uses the class-1 score; multiclass AUC is the
/// macro one-vs-rest mean.
pub fn compute_metrics(
    predictions: &[usize],
    scores: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<Metrics> {
    let n = labels.len();
    if n == 0 || predictions.len() != n || scores.len() != n {
        return Err(MuseError::internal(format!(
            "metric inputs disagree: {} predictions, {} score rows, {} labels",
            predictions.len(),
            scores.len(),
            n
        )));
    }
    if num_classes < 2 || scores.iter().any(|s| s.len() != num_classes) {
        return Err(MuseError::internal("score rows must have one entry per class"));
    }
    if labels.iter().chain(predictions).any(|&l| l >= num_classes) {
        return Err(MuseError::internal("label outside the class range"));
    }

    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let acc = correct as f64 / n as f64;

    let present: Vec<usize> = (0..num_classes).filter(|c| labels.contains(c)).collect();
    let auc = if present.len() < 2 {
        None
    } else if num_classes == 2 {
        let col: Vec<f64> = scores.iter().map(|s| s[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        binary_auc(&col, &pos)
    } else {
        let per_class: Vec<f64> = present
            .iter()
            .filter_map(|&c| {
                let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                binary_auc(&col, &pos)
            })
            .collect();
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    };

    // Macro F1 over every class that appears in labels or predictions.
    let mut f1_sum = 0.0;
    let mut counted = 0;
    for c in 0..num_classes {
        let tp = predictions.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let fp = predictions.iter().zip(labels).filter(|(p, l)| **p == c && **l != c).count() as f64;
        let fn_ = predictions.iter().zip(labels).filter(|(p, l)| **p != c && **l == c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        f1_sum += 2.0 * tp / (2.0 * tp + fp + fn_);
        counted += 1;
    }
    let f1 = if counted == 0 { 0.0 } else { f1_sum / counted as f64 };
    Ok(Metrics { acc, auc, f1 })
}
