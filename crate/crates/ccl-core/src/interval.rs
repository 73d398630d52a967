//! Normalized temporal intervals, localization losses, and retrieval metrics.
//!
//! All times live in [0, 1]. Predictions are index-aligned to sentences, so
//! there is no detection-style matching anywhere.

use serde::{Deserialize, Serialize};

use crate::error::{CclError, Result};

/// A normalized temporal span `[start, end]` with `0 <= start <= end <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end > 1.0 || start > end {
            return Err(CclError::InvalidInterval { start, end });
        }
        Ok(Interval { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// One interval per query sentence, in sentence order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IntervalSet(pub Vec<Interval>);

impl IntervalSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Interval> {
        self.0.iter()
    }
}

/// Intersection over union. A zero-length union yields 0 by definition,
/// which keeps degenerate point intervals legal without special casing
/// downstream.
pub fn iou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - |C \ (a u b)| / |C|` with C the smallest
/// enclosing interval. Zero-length C falls back to plain IoU.
pub fn giou(a: Interval, b: Interval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    let enclosing = a.end.max(b.end) - a.start.min(b.start);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

/// Mean over sentences of `|d_start| + |d_end| + (1 - giou)`.
pub fn location_loss(pred: &IntervalSet, target: &IntervalSet) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CclError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(CclError::EmptyMetric("location_loss"));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        let l1 = (p.start - t.start).abs() + (p.end - t.end).abs();
        total += l1 + (1.0 - giou(*p, *t));
    }
    Ok(total / pred.len() as f64)
}

/// Fraction of entries with IoU >= m.
pub fn recall_at(ious: &[f64], m: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(CclError::EmptyMetric("recall_at"));
    }
    let hits = ious.iter().filter(|&&v| v >= m).count();
    Ok(hits as f64 / ious.len() as f64)
}

/// Arithmetic mean of per-sentence IoUs. The dataset-level metric averages
/// over all sentences of all test samples, not over paragraphs.
pub fn mean_iou(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(CclError::EmptyMetric("mean_iou"));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
