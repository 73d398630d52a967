//! First training stage: a mean teacher with context-removal consistency.
//!
//! The student sees paragraphs with sentences removed; the teacher sees the
//! full paragraph and its exponentially averaged weights supply the targets.
//! Consistency is enforced contrastively between moment features pooled from
//! the student encoding at the teacher's intervals and the student's query
//! projections. The teacher is never differentiated through: it only ever
//! moves by the exponential average below.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_removal, map_targets, sample_removal, RemovalPlan};
use crate::error::{CclError, Result};
use crate::model::{
    adam_step, forward, forward_backward, forward_backward_with_indices, init_params, AdamState,
    LossSpec, LossValues, ModelConfig, ModelParams,
};
use crate::synthetic::Sample;

/// Which consistency machinery is active. `Full` is the intended method; the
/// others are diagnostic arms that disable pieces of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Arm {
    /// Teacher targets on unaugmented student inputs, plain L1 consistency.
    MtOnly,
    /// Removal views of labeled samples; no teacher, no unlabeled data.
    AugOnly,
    /// Teacher targets mapped through the removal, plain L1 consistency.
    MtAug,
    /// Contrastive consistency without removal (identity views).
    MtCr,
    /// Removal views plus contrastive consistency.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub model: ModelConfig,
    pub arm: Stage1Arm,
    pub steps: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Weight on the supervised location and attention terms.
    pub lambda1: f64,
    /// Weight on the consistency term.
    pub lambda2: f64,
    /// Linear ramp on the consistency weight: it reaches lambda2 at this
    /// step. Early teacher targets are noise, so consistency starts at zero.
    #[serde(default)]
    pub lambda2_warmup_steps: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Teacher decay: theta' <- gamma * theta' + (1 - gamma) * theta.
    pub gamma: f64,
    pub lr: f64,
    /// Cosine-decay floor for the learning rate; None keeps lr constant.
    #[serde(default)]
    pub lr_final: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            model: ModelConfig::default(),
            arm: Stage1Arm::Full,
            steps: 400,
            batch_labeled: 8,
            batch_unlabeled: 8,
            lambda1: 2.0,
            lambda2: 0.75,
            lambda2_warmup_steps: 0,
            tau: 0.01,
            gamma: 0.999,
            lr: 1e-4,
            lr_final: None,
            seed: 0,
            log_every: 50,
        }
    }
}

pub(crate) fn cosine_lr(lr: f64, lr_final: Option<f64>, step: usize, steps: usize) -> f64 {
    match lr_final {
        None => lr,
        Some(lf) => {
            let t = step as f64 / steps.max(1) as f64;
            lf + 0.5 * (lr - lf) * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_labeled == 0 {
            return Err(CclError::InvalidConfig(
                "batch_labeled must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CclError::InvalidConfig("gamma must be in [0, 1)".into()));
        }
        if self.tau <= 0.0 || self.lr <= 0.0 {
            return Err(CclError::InvalidConfig("tau and lr must be positive".into()));
        }
        Ok(())
    }
}

/// theta' <- gamma * theta' + (1 - gamma) * theta, elementwise.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, gamma: f64) -> Result<()> {
    teacher.same_shapes(student)?;
    for (name, t) in teacher.map.iter_mut() {
        let s = &student.map[name];
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            *tv = gamma * *tv + (1.0 - gamma) * sv;
        }
    }
    Ok(())
}

pub struct Stage1Result {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub opt_state: AdamState,
}

fn accumulate(acc: &mut crate::model::params::GradMap, g: &crate::model::params::GradMap) {
    for (name, t) in acc.iter_mut() {
        for (a, b) in t.data.iter_mut().zip(&g[name].data) {
            *a += b;
        }
    }
}

struct StepStats {
    total: f64,
    loc: f64,
    att: f64,
    con: f64,
    terms: usize,
}

impl StepStats {
    fn add(&mut self, v: &LossValues) {
        self.total += v.total;
        self.loc += v.loc;
        self.att += v.att;
        self.con += v.con;
        self.terms += 1;
    }
}

/// One optimization step over freshly drawn labeled and unlabeled batches.
/// Gradients are averaged over every forward pass that carries a loss.
fn stage1_step(
    cfg: &Stage1Config,
    student: &mut ModelParams,
    teacher: &mut ModelParams,
    opt: &mut AdamState,
    labeled: &[Sample],
    unlabeled: &[Sample],
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<LossValues> {
    // Supervised and consistency gradients are averaged over their own term
    // counts, so adding unlabeled data never dilutes the supervised signal.
    let mut sup_grads = student.zeros_like();
    let mut con_grads = student.zeros_like();
    let mut sup_stats = StepStats {
        total: 0.0,
        loc: 0.0,
        att: 0.0,
        con: 0.0,
        terms: 0,
    };
    let mut con_stats = StepStats {
        total: 0.0,
        loc: 0.0,
        att: 0.0,
        con: 0.0,
        terms: 0,
    };
    let lambda2 = if cfg.lambda2_warmup_steps > 0 {
        cfg.lambda2 * ((step + 1) as f64 / cfg.lambda2_warmup_steps as f64).min(1.0)
    } else {
        cfg.lambda2
    };

    for _ in 0..cfg.batch_labeled {
        let s = &labeled[rng.gen_range(0..labeled.len())];
        let gt = s.gt_intervals.as_ref().unwrap();
        let spec = LossSpec {
            loc: Some((gt.clone(), cfg.lambda1)),
            att: Some((gt.clone(), cfg.lambda1)),
            ..Default::default()
        };
        let (values, g, _) =
            forward_backward(student, &cfg.model, &s.video_feats, &s.query_feats, &spec)?;
        accumulate(&mut sup_grads, &g);
        sup_stats.add(&values);

        if matches!(
            cfg.arm,
            Stage1Arm::AugOnly | Stage1Arm::MtAug | Stage1Arm::Full
        ) {
            let plan = sample_removal(s.num_sentences(), rng);
            let q = apply_removal(&s.query_feats, &plan)?;
            let gt_kept = map_targets(gt, &plan)?;
            let spec = LossSpec {
                loc: Some((gt_kept.clone(), cfg.lambda1)),
                att: Some((gt_kept, cfg.lambda1)),
                ..Default::default()
            };
            let (values, g, _) = forward_backward_with_indices(
                student,
                &cfg.model,
                &s.video_feats,
                &q,
                Some(&plan.kept_indices),
                &spec,
            )?;
            accumulate(&mut sup_grads, &g);
            sup_stats.add(&values);
        }
    }

    if cfg.arm != Stage1Arm::AugOnly && !unlabeled.is_empty() {
        for _ in 0..cfg.batch_unlabeled {
            let s = &unlabeled[rng.gen_range(0..unlabeled.len())];
            let t_out = forward(teacher, &cfg.model, &s.video_feats, &s.query_feats)?;
            let t_iv = t_out.intervals;
            let plan = match cfg.arm {
                Stage1Arm::MtOnly | Stage1Arm::MtCr => RemovalPlan::identity(s.num_sentences()),
                _ => sample_removal(s.num_sentences(), rng),
            };
            let q = apply_removal(&s.query_feats, &plan)?;
            let targets = map_targets(&t_iv, &plan)?;
            let spec = match cfg.arm {
                Stage1Arm::MtOnly | Stage1Arm::MtAug => LossSpec {
                    pred_l1: Some((targets, lambda2)),
                    ..Default::default()
                },
                _ => LossSpec {
                    con: Some((targets, cfg.tau, lambda2)),
                    ..Default::default()
                },
            };
            let (values, g, _) = forward_backward_with_indices(
                student,
                &cfg.model,
                &s.video_feats,
                &q,
                Some(&plan.kept_indices),
                &spec,
            )?;
            accumulate(&mut con_grads, &g);
            con_stats.add(&values);
        }
    }

    let sup_scale = 1.0 / sup_stats.terms.max(1) as f64;
    let con_scale = 1.0 / con_stats.terms.max(1) as f64;
    let mut grads = sup_grads;
    for (name, t) in grads.iter_mut() {
        let c = &con_grads[name];
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = *x * sup_scale + c.data[i] * con_scale;
        }
    }
    let lr = cosine_lr(cfg.lr, cfg.lr_final, step, cfg.steps);
    adam_step(student, &grads, opt, lr)?;
    for t in student.map.values() {
        if !t.all_finite() {
            return Err(CclError::Diverged {
                step,
                msg: "non-finite parameter after update".into(),
            });
        }
    }
    ema_update(teacher, student, cfg.gamma)?;

    Ok(LossValues {
        total: sup_stats.total * sup_scale + con_stats.total * con_scale,
        loc: sup_stats.loc * sup_scale,
        att: sup_stats.att * sup_scale,
        con: con_stats.con * con_scale,
    })
}

/// Runs the full first stage and returns the student, the teacher, and the
/// optimizer state. Progress lines go to `log` as JSON, one per `log_every`
/// steps and always at the final step.
pub fn train_stage1(
    cfg: &Stage1Config,
    labeled: &[Sample],
    unlabeled: &[Sample],
    mut log: Option<&mut dyn Write>,
) -> Result<Stage1Result> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(CclError::EmptyTrainingSet);
    }
    let mut student = init_params(&cfg.model, cfg.seed)?;
    let mut teacher = student.clone();
    let mut opt = AdamState::new(&student);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for step in 0..cfg.steps {
        let values = stage1_step(
            cfg,
            &mut student,
            &mut teacher,
            &mut opt,
            labeled,
            unlabeled,
            &mut rng,
            step,
        )?;
        if !values.total.is_finite() {
            return Err(CclError::Diverged {
                step,
                msg: format!("non-finite loss {}", values.total),
            });
        }
        if let Some(w) = log.as_deref_mut() {
            if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
                writeln!(
                    w,
                    "{{\"step\":{},\"loss_total\":{:.6},\"loss_loc\":{:.6},\"loss_att\":{:.6},\"loss_con\":{:.6}}}",
                    step + 1,
                    values.total,
                    values.loc,
                    values.att,
                    values.con
                )?;
            }
        }
    }

    Ok(Stage1Result {
        student,
        teacher,
        opt_state: opt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_dataset, SyntheticConfig};

    #[test]
    fn ema_hand_check() {
        let cfg = ModelConfig {
            d: 4,
            enc_layers: 1,
            dec_layers: 1,
            heads: 1,
            ffn_dim: 4,
            d_v: 4,
            d_q: 4,
            max_queries: 2,
            ..ModelConfig::default()
        };
        let mut teacher = init_params(&cfg, 0).unwrap();
        let mut student = init_params(&cfg, 0).unwrap();
        for t in teacher.map.values_mut() {
            t.data.fill(2.0);
        }
        for t in student.map.values_mut() {
            t.data.fill(1.0);
        }
        ema_update(&mut teacher, &student, 0.999).unwrap();
        for t in teacher.map.values() {
            for &x in &t.data {
                assert!((x - 1.999).abs() < 1e-12, "got {x}");
            }
        }
    }

    #[test]
    fn ema_contracts_toward_student() {
        let cfg = ModelConfig {
            d: 4,
            enc_layers: 1,
            dec_layers: 1,
            heads: 1,
            ffn_dim: 4,
            d_v: 4,
            d_q: 4,
            max_queries: 2,
            ..ModelConfig::default()
        };
        let student = init_params(&cfg, 1).unwrap();
        let mut teacher = init_params(&cfg, 2).unwrap();
        let gap = |a: &ModelParams, b: &ModelParams| -> f64 {
            a.map
                .iter()
                .map(|(n, t)| {
                    t.data
                        .iter()
                        .zip(&b.map[n].data)
                        .map(|(x, y)| (x - y).abs())
                        .sum::<f64>()
                })
                .sum()
        };
        let before = gap(&teacher, &student);
        ema_update(&mut teacher, &student, 0.9).unwrap();
        let after = gap(&teacher, &student);
        assert!(after < before);
        assert!((after - 0.9 * before).abs() < 1e-9 * before.max(1.0));
    }

    fn tiny_run(arm: Stage1Arm, seed: u64) -> Stage1Result {
        let dcfg = SyntheticConfig {
            num_samples: 8,
            num_test: 2,
            t_clips: 16,
            d_v: 8,
            d_q: 8,
            n_range: (2, 3),
            concept_dim: 4,
            labeled_fraction: 0.5,
            seed: 5,
            ..SyntheticConfig::default()
        };
        let split = generate_dataset(&dcfg).unwrap();
        let cfg = Stage1Config {
            model: ModelConfig {
                d: 8,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                ffn_dim: 16,
                d_v: 8,
                d_q: 8,
                max_queries: 4,
                ..ModelConfig::default()
            },
            arm,
            steps: 5,
            batch_labeled: 2,
            batch_unlabeled: 2,
            seed,
            log_every: 5,
            ..Stage1Config::default()
        };
        train_stage1(&cfg, &split.train_labeled, &split.train_unlabeled, None).unwrap()
    }

    #[test]
    fn training_is_deterministic() {
        let a = tiny_run(Stage1Arm::Full, 3);
        let b = tiny_run(Stage1Arm::Full, 3);
        assert_eq!(a.student, b.student);
        assert_eq!(a.teacher, b.teacher);
        assert_eq!(a.opt_state, b.opt_state);
    }

    #[test]
    fn all_arms_run() {
        for arm in [
            Stage1Arm::MtOnly,
            Stage1Arm::AugOnly,
            Stage1Arm::MtAug,
            Stage1Arm::MtCr,
            Stage1Arm::Full,
        ] {
            let r = tiny_run(arm, 7);
            for t in r.student.map.values() {
                assert!(t.all_finite());
            }
        }
    }

    #[test]
    fn zero_steps_returns_initial_copies() {
        let dcfg = SyntheticConfig {
            num_samples: 2,
            num_test: 1,
            t_clips: 16,
            d_v: 8,
            d_q: 8,
            n_range: (2, 2),
            concept_dim: 4,
            labeled_fraction: 1.0,
            ..SyntheticConfig::default()
        };
        let split = generate_dataset(&dcfg).unwrap();
        let cfg = Stage1Config {
            model: ModelConfig {
                d: 8,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                ffn_dim: 16,
                d_v: 8,
                d_q: 8,
                max_queries: 4,
                ..ModelConfig::default()
            },
            steps: 0,
            ..Stage1Config::default()
        };
        let r = train_stage1(&cfg, &split.train_labeled, &[], None).unwrap();
        let init = init_params(&cfg.model, cfg.seed).unwrap();
        assert_eq!(r.student, init);
        assert_eq!(r.teacher, init);
    }

    #[test]
    fn fixed_batch_loss_decreases() {
        let dcfg = SyntheticConfig {
            num_samples: 2,
            num_test: 1,
            t_clips: 16,
            d_v: 8,
            d_q: 8,
            n_range: (3, 3),
            concept_dim: 4,
            labeled_fraction: 0.5,
            seed: 5,
            ..SyntheticConfig::default()
        };
        let split = generate_dataset(&dcfg).unwrap();
        let cfg = Stage1Config {
            model: ModelConfig {
                d: 8,
                enc_layers: 1,
                dec_layers: 1,
                heads: 2,
                ffn_dim: 16,
                d_v: 8,
                d_q: 8,
                max_queries: 4,
                ..ModelConfig::default()
            },
            steps: 50,
            batch_labeled: 1,
            batch_unlabeled: 1,
            lr: 1e-2,
            log_every: 1,
            ..Stage1Config::default()
        };
        let mut log = Vec::new();
        train_stage1(
            &cfg,
            &split.train_labeled,
            &split.train_unlabeled,
            Some(&mut log),
        )
        .unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 50);
        // Per-step totals are noisy (removal plans are resampled each step),
        // so compare window means at the two ends.
        let mean = |r: std::ops::Range<usize>| {
            r.map(|i| lines[i]["loss_total"].as_f64().unwrap()).sum::<f64>() / 10.0
        };
        let first = mean(0..10);
        let last = mean(40..50);
        assert!(last < first, "loss {first:.4} -> {last:.4} did not decrease");
    }

    #[test]
    fn empty_labeled_set_is_rejected() {
        let cfg = Stage1Config::default();
        assert!(matches!(
            train_stage1(&cfg, &[], &[], None),
            Err(CclError::EmptyTrainingSet)
        ));
    }
}
