//! Classification, segmentation and graph-quality metrics.

use crate::error::{Error, Result};
use crate::graph::SampledGraph;
use crate::tensor::Array;

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(scores: &Array) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of masked nodes predicted correctly.
pub fn accuracy(pred: &[usize], truth: &[usize], mask: &[bool]) -> Result<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for i in (0..truth.len()).filter(|&i| mask[i]) {
        total += 1;
        if pred[i] == truth[i] {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("accuracy mask"));
    }
    Ok(hit as f64 / total as f64)
}

pub use crate::losses::per_class_accuracy;

/// Fraction of edges with both endpoints in `mask` whose endpoint labels
/// agree; `None` when no edge qualifies.
pub fn homophily(g: &SampledGraph, labels: &[usize], mask: &[bool]) -> Option<f64> {
    let mut total = 0usize;
    let mut same = 0usize;
    for (i, j, _) in g.edges() {
        if mask[i] && mask[j] {
            total += 1;
            if labels[i] == labels[j] {
                same += 1;
            }
        }
    }
    (total > 0).then(|| same as f64 / total as f64)
}

/// Mean over parts of one shape's IoU. Parts absent from both prediction and
/// ground truth are skipped; a shape with no scored part counts as 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], parts: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("shape_iou", &[pred.len()], &[truth.len()]));
    }
    for &l in pred.iter().chain(truth) {
        if !parts.contains(&l) {
            return Err(Error::Data(format!("part label {l} is not in the category part set {parts:?}")));
        }
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &part in parts {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in pred.iter().zip(truth) {
            let (a, b) = (p == part, t == part);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            counted += 1;
        }
    }
    Ok(if counted == 0 { 1.0 } else { sum / counted as f64 })
}

/// Mean over shapes of [`shape_iou`].
pub fn mean_iou(pred: &[Vec<usize>], truth: &[Vec<usize>], part_sets: &[Vec<usize>]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != part_sets.len() {
        return Err(Error::shape("mean_iou", &[pred.len()], &[truth.len(), part_sets.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Empty("mean_iou"));
    }
    let mut total = 0.0;
    for ((p, t), parts) in pred.iter().zip(truth).zip(part_sets) {
        total += shape_iou(p, t, parts)?;
    }
    Ok(total / pred.len() as f64)
}
