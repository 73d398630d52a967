//! Grounding metrics over a labeled sample set.

use serde::{Deserialize, Serialize};

use crate::error::{CclError, Result};
use crate::interval::{iou, mean_iou, recall_at};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::synthetic::Sample;

/// Per-sentence IoUs for one sample, in sentence order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub ious: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_iou: f64,
    pub recall_03: f64,
    pub recall_05: f64,
    pub recall_07: f64,
    pub num_sentences: usize,
    pub per_sample: Vec<SampleEval>,
}

/// Metrics are averaged per sentence across all samples.
pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, samples: &[Sample]) -> Result<EvalMetrics> {
    let mut all_ious = Vec::new();
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s
            .gt_intervals
            .as_ref()
            .ok_or_else(|| CclError::UnknownSample(format!("{} has no ground truth", s.id)))?;
        let out = forward(params, cfg, &s.video_feats, &s.query_feats)?;
        if out.intervals.len() != gt.len() {
            return Err(CclError::LengthMismatch {
                left: out.intervals.len(),
                right: gt.len(),
            });
        }
        let ious: Vec<f64> = out
            .intervals
            .iter()
            .zip(gt.iter())
            .map(|(&p, &g)| iou(p, g))
            .collect();
        all_ious.extend_from_slice(&ious);
        per_sample.push(SampleEval {
            id: s.id.clone(),
            ious,
        });
    }
    Ok(EvalMetrics {
        mean_iou: mean_iou(&all_ious)?,
        recall_03: recall_at(&all_ious, 0.3)?,
        recall_05: recall_at(&all_ious, 0.5)?,
        recall_07: recall_at(&all_ious, 0.7)?,
        num_sentences: all_ious.len(),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::synthetic::{generate_dataset, SyntheticConfig};

    fn small_setup() -> (ModelParams, ModelConfig, Vec<Sample>) {
        let dcfg = SyntheticConfig {
            num_samples: 4,
            num_test: 3,
            t_clips: 16,
            d_v: 8,
            d_q: 8,
            n_range: (2, 3),
            concept_dim: 4,
            ..SyntheticConfig::default()
        };
        let split = generate_dataset(&dcfg).unwrap();
        let mcfg = ModelConfig {
            d: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 16,
            d_v: 8,
            d_q: 8,
            max_queries: 4,
            ..ModelConfig::default()
        };
        let params = init_params(&mcfg, 0).unwrap();
        (params, mcfg, split.test)
    }

    #[test]
    fn metrics_are_in_range_and_consistent() {
        let (params, mcfg, test) = small_setup();
        let m = evaluate(&params, &mcfg, &test).unwrap();
        assert!(m.mean_iou >= 0.0 && m.mean_iou <= 1.0);
        for r in [m.recall_03, m.recall_05, m.recall_07] {
            assert!((0.0..=1.0).contains(&r));
        }
        assert!(m.recall_03 >= m.recall_05 && m.recall_05 >= m.recall_07);
        let flat: Vec<f64> = m.per_sample.iter().flat_map(|s| s.ious.clone()).collect();
        assert_eq!(flat.len(), m.num_sentences);
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        assert!((mean - m.mean_iou).abs() < 1e-12);
    }

    #[test]
    fn full_span_predictions_score_mean_gt_length() {
        // IoU([0,1], g) = |g|, so a predictor that always answers the whole
        // video scores exactly the mean ground-truth interval length.
        let (_, _, test) = small_setup();
        let full = crate::interval::Interval::new(0.0, 1.0).unwrap();
        let mut ious = Vec::new();
        let mut lengths = Vec::new();
        for s in &test {
            for &g in s.gt_intervals.as_ref().unwrap().iter() {
                ious.push(iou(full, g));
                lengths.push(g.end - g.start);
            }
        }
        let miou = mean_iou(&ious).unwrap();
        let mean_len = lengths.iter().sum::<f64>() / lengths.len() as f64;
        assert!((miou - mean_len).abs() < 1e-12);
    }

    #[test]
    fn untrained_model_has_near_zero_high_iou_recall() {
        let dcfg = SyntheticConfig::default();
        let split = generate_dataset(&dcfg).unwrap();
        let mcfg = ModelConfig::default();
        let params = init_params(&mcfg, 0).unwrap();
        let m = evaluate(&params, &mcfg, &split.test).unwrap();
        assert!(m.recall_07 < 0.05, "recall@0.7 = {}", m.recall_07);
    }

    #[test]
    fn unlabeled_samples_are_rejected() {
        let (params, mcfg, mut test) = small_setup();
        test[0].gt_intervals = None;
        assert!(evaluate(&params, &mcfg, &test).is_err());
    }
}
