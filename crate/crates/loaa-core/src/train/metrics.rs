//! Classification metrics: top-1 accuracy and mean average precision. All
//! ties (argmax and ranking) break toward the lower index for determinism.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub top1: f64,
    pub map: f64,
    pub n: usize,
}

/// Fraction of rows whose argmax matches the label; ties pick the lowest
/// class index.
pub fn top1_accuracy(scores: &[f32], n_rows: usize, n_cols: usize, labels: &[usize]) -> f64 {
    assert_eq!(scores.len(), n_rows * n_cols);
    assert_eq!(labels.len(), n_rows);
    if n_rows == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for (row, &label) in scores.chunks_exact(n_cols).zip(labels) {
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / n_rows as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapOutcome {
    pub map: f64,
    /// Classes skipped because they had no positive sample.
    pub skipped_classes: Vec<usize>,
}

/// Mean over classes of average precision. Per class, samples are ranked by
/// score descending (ties by lower sample index) and AP is the mean of the
/// precision at each positive's rank. Classes without positives are skipped
/// and reported; if every class is skipped the metric is undefined.
pub fn mean_average_precision(
    scores: &[f32],
    n_rows: usize,
    n_cols: usize,
    truth: &[bool],
) -> Result<MapOutcome> {
    if scores.len() != n_rows * n_cols || truth.len() != n_rows * n_cols {
        return Err(CoreError::Dimension(format!(
            "scores/truth must both be {n_rows}x{n_cols}"
        )));
    }
    let mut sum = 0.0f64;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for c in 0..n_cols {
        let n_pos = (0..n_rows).filter(|&i| truth[i * n_cols + c]).count();
        if n_pos == 0 {
            skipped.push(c);
            continue;
        }
        let mut order: Vec<usize> = (0..n_rows).collect();
        order.sort_by(|&a, &b| {
            scores[b * n_cols + c]
                .partial_cmp(&scores[a * n_cols + c])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut hits = 0usize;
        let mut ap = 0.0f64;
        for (rank0, &i) in order.iter().enumerate() {
            if truth[i * n_cols + c] {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        sum += ap / n_pos as f64;
        used += 1;
    }
    if used == 0 {
        return Err(CoreError::UndefinedMetric(
            "every class was skipped: no positive samples at all".into(),
        ));
    }
    Ok(MapOutcome { map: sum / used as f64, skipped_classes: skipped })
}
