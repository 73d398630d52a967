//! Sentence-removal perturbation and the index mapping that aligns
//! augmented-view predictions with original-view predictions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CclError, Result};
use crate::interval::IntervalSet;
use crate::tensor::Tensor;

/// Which original sentences survive a removal; `kept_indices` is strictly
/// increasing, so kept relative order equals original relative order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalPlan {
    pub kept_indices: Vec<usize>,
    pub removed: usize,
    pub original: usize,
}

impl RemovalPlan {
    pub fn identity(n: usize) -> Self {
        RemovalPlan {
            kept_indices: (0..n).collect(),
            removed: 0,
            original: n,
        }
    }

    /// Keep exactly the given sorted indices.
    pub fn keeping(kept: Vec<usize>, n: usize) -> Self {
        debug_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        RemovalPlan {
            removed: n - kept.len(),
            kept_indices: kept,
            original: n,
        }
    }
}

/// Default policy: remove M ~ Uniform{1..ceil(N/2)} random sentences; a
/// single-sentence paragraph has no context to remove and passes through.
pub fn sample_removal(n: usize, rng: &mut ChaCha8Rng) -> RemovalPlan {
    if n <= 1 {
        return RemovalPlan::identity(n);
    }
    let m_max = n.div_ceil(2);
    let m = rng.gen_range(1..=m_max);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let mut kept: Vec<usize> = indices.into_iter().skip(m).collect();
    kept.sort_unstable();
    RemovalPlan {
        kept_indices: kept,
        removed: m,
        original: n,
    }
}

/// Gather the kept query rows in order.
pub fn apply_removal(query_feats: &Tensor, plan: &RemovalPlan) -> Result<Tensor> {
    let n = query_feats.rows();
    let d = query_feats.cols();
    let mut out = Tensor::zeros(&[plan.kept_indices.len(), d]);
    for (row, &idx) in plan.kept_indices.iter().enumerate() {
        if idx >= n {
            return Err(CclError::IndexOutOfRange(format!(
                "kept index {idx} of {n} sentences"
            )));
        }
        out.row_mut(row).copy_from_slice(query_feats.row(idx));
    }
    Ok(out)
}

/// Gather the full-view targets (teacher predictions or labels) at the kept
/// indices, aligning them with the augmented view's predictions.
pub fn map_targets(full_set: &IntervalSet, plan: &RemovalPlan) -> Result<IntervalSet> {
    if full_set.len() != plan.original {
        return Err(CclError::LengthMismatch {
            left: full_set.len(),
            right: plan.original,
        });
    }
    let mut out = Vec::with_capacity(plan.kept_indices.len());
    for &idx in &plan.kept_indices {
        out.push(full_set.0[idx]);
    }
    Ok(IntervalSet(out))
}
