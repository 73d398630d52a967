//! End-to-end experiment orchestration.
//!
//! One JSON config drives the whole pipeline: synthesize data, run the
//! teacher-student stage, score and bucket pseudo-labels, retrain, and
//! evaluate everything against the labeled-only baseline. All artifacts land
//! under a single output root and every run with the same config is
//! byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CclError, Result};
use crate::eval::{evaluate, EvalMetrics};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::pseudo::{
    generate_pseudo_labels, load_pseudo_labels, retrain, save_pseudo_labels, Bucket,
    ModelPredictor, PseudoConfig, PseudoLabel, RetrainConfig,
};
use crate::stage1::{train_stage1, Stage1Arm, Stage1Config};
use crate::synthetic::{generate_dataset, load_dataset, save_dataset, DatasetSplit, SyntheticConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub stage1: Stage1Config,
    pub pseudo: PseudoConfig,
    pub retrain: RetrainConfig,
    /// Seeds for the training pipeline; the dataset keeps its own seed.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: SyntheticConfig::default(),
            stage1: Stage1Config::default(),
            pseudo: PseudoConfig::default(),
            retrain: RetrainConfig::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.stage1.validate()?;
        self.pseudo.validate()?;
        self.retrain.validate()?;
        if self.seeds.is_empty() {
            return Err(CclError::InvalidConfig("need at least one seed".into()));
        }
        for m in [&self.stage1.model, &self.retrain.model] {
            if m.d_v != self.data.d_v || m.d_q != self.data.d_q {
                return Err(CclError::InvalidConfig(
                    "model input dims must match the dataset".into(),
                ));
            }
            if m.max_queries < self.data.n_range.1 {
                return Err(CclError::InvalidConfig(
                    "max_queries must cover the dataset's sentence counts".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical serialized config; stamped into reports so a
    /// report can be traced to the exact configuration that produced it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).unwrap().as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// Metrics without the per-sample payload, for compact reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_iou: f64,
    pub recall_03: f64,
    pub recall_05: f64,
    pub recall_07: f64,
    pub num_sentences: usize,
}

impl From<&EvalMetrics> for EvalSummary {
    fn from(m: &EvalMetrics) -> Self {
        EvalSummary {
            mean_iou: m.mean_iou,
            recall_03: m.recall_03,
            recall_05: m.recall_05,
            recall_07: m.recall_07,
            num_sentences: m.num_sentences,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketCounts {
    pub low: usize,
    pub mid: usize,
    pub high: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub baseline: EvalSummary,
    pub stage1_student: EvalSummary,
    pub stage1_teacher: EvalSummary,
    pub retrained: EvalSummary,
    pub buckets: BucketCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub mean_baseline_miou: f64,
    pub mean_stage1_teacher_miou: f64,
    pub mean_retrained_miou: f64,
}

pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        Paths {
            root: root.to_path_buf(),
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.jsonl")
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn stage1_teacher(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("stage1-teacher.ckpt.json")
    }

    pub fn stage1_student(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("stage1-student.ckpt.json")
    }

    pub fn stage1_log(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("stage1.log.jsonl")
    }

    pub fn pseudo_labels(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("pseudo-labels.jsonl")
    }

    pub fn retrain_ckpt(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("retrain.ckpt.json")
    }

    pub fn retrain_log(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("retrain.log.jsonl")
    }

    pub fn baseline_ckpt(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("baseline.ckpt.json")
    }

    pub fn eval_details(&self, seed: u64, stage: &str) -> PathBuf {
        self.seed_dir(seed).join(format!("eval-{stage}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn ablation_report(&self) -> PathBuf {
        self.root.join("ablation.json")
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig, paths: &Paths) -> Result<()> {
    fs::create_dir_all(&paths.root)?;
    let split = generate_dataset(&cfg.data)?;
    save_dataset(&split, &cfg.data, &paths.dataset())
}

fn load_or_err(paths: &Paths) -> Result<DatasetSplit> {
    let (split, _) = load_dataset(&paths.dataset())?;
    Ok(split)
}

fn seeded_stage1(cfg: &ExperimentConfig, seed: u64) -> Stage1Config {
    Stage1Config {
        seed,
        ..cfg.stage1.clone()
    }
}

fn seeded_pseudo(cfg: &ExperimentConfig, seed: u64) -> PseudoConfig {
    PseudoConfig {
        seed,
        ..cfg.pseudo.clone()
    }
}

fn seeded_retrain(cfg: &ExperimentConfig, seed: u64) -> RetrainConfig {
    RetrainConfig {
        seed,
        ..cfg.retrain.clone()
    }
}

pub fn cmd_train_stage1(cfg: &ExperimentConfig, paths: &Paths, seed: u64) -> Result<()> {
    let split = load_or_err(paths)?;
    fs::create_dir_all(paths.stage1_log(seed).parent().unwrap())?;
    let s1 = seeded_stage1(cfg, seed);
    let mut log = fs::File::create(paths.stage1_log(seed))?;
    let result = train_stage1(
        &s1,
        &split.train_labeled,
        &split.train_unlabeled,
        Some(&mut log),
    )?;
    save_checkpoint(
        &Checkpoint {
            config: s1.model.clone(),
            params: result.teacher,
            opt_state: None,
            rng_state: seed,
        },
        &paths.stage1_teacher(seed),
    )?;
    save_checkpoint(
        &Checkpoint {
            config: s1.model.clone(),
            params: result.student,
            opt_state: Some(result.opt_state),
            rng_state: seed,
        },
        &paths.stage1_student(seed),
    )
}

pub fn cmd_pseudo_label(cfg: &ExperimentConfig, paths: &Paths, seed: u64) -> Result<Vec<PseudoLabel>> {
    let split = load_or_err(paths)?;
    let teacher = load_checkpoint(&paths.stage1_teacher(seed))?;
    let predictor = ModelPredictor {
        params: &teacher.params,
        cfg: &teacher.config,
    };
    let labels =
        generate_pseudo_labels(&predictor, &split.train_unlabeled, &seeded_pseudo(cfg, seed))?;
    save_pseudo_labels(&labels, &paths.pseudo_labels(seed))?;
    Ok(labels)
}

pub fn cmd_retrain(cfg: &ExperimentConfig, paths: &Paths, seed: u64) -> Result<()> {
    let split = load_or_err(paths)?;
    let labels = load_pseudo_labels(&paths.pseudo_labels(seed))?;
    let rcfg = seeded_retrain(cfg, seed);
    let mut log = fs::File::create(paths.retrain_log(seed))?;
    let (params, opt) = retrain(
        &rcfg,
        &split.train_labeled,
        &split.train_unlabeled,
        &labels,
        Some(&mut log),
    )?;
    save_checkpoint(
        &Checkpoint {
            config: rcfg.model.clone(),
            params,
            opt_state: Some(opt),
            rng_state: seed,
        },
        &paths.retrain_ckpt(seed),
    )
}

/// Labeled-only reference: the retraining path with no pseudo-labels kept.
pub fn cmd_baseline(cfg: &ExperimentConfig, paths: &Paths, seed: u64) -> Result<()> {
    let split = load_or_err(paths)?;
    fs::create_dir_all(paths.baseline_ckpt(seed).parent().unwrap())?;
    let rcfg = seeded_retrain(cfg, seed);
    let (params, opt) = retrain(&rcfg, &split.train_labeled, &split.train_unlabeled, &[], None)?;
    save_checkpoint(
        &Checkpoint {
            config: rcfg.model.clone(),
            params,
            opt_state: Some(opt),
            rng_state: seed,
        },
        &paths.baseline_ckpt(seed),
    )
}

pub fn cmd_eval(paths: &Paths, ckpt_path: &Path) -> Result<EvalMetrics> {
    let split = load_or_err(paths)?;
    let ckpt = load_checkpoint(ckpt_path)?;
    evaluate(&ckpt.params, &ckpt.config, &split.test)
}

fn write_details(metrics: &EvalMetrics, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

/// Full pipeline over every configured seed, ending in `report.json`.
pub fn cmd_run(cfg: &ExperimentConfig, paths: &Paths) -> Result<MetricsReport> {
    cfg.validate()?;
    cmd_generate(cfg, paths)?;
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        cmd_train_stage1(cfg, paths, seed)?;
        let labels = cmd_pseudo_label(cfg, paths, seed)?;
        cmd_retrain(cfg, paths, seed)?;
        cmd_baseline(cfg, paths, seed)?;

        let baseline = cmd_eval(paths, &paths.baseline_ckpt(seed))?;
        let student = cmd_eval(paths, &paths.stage1_student(seed))?;
        let teacher = cmd_eval(paths, &paths.stage1_teacher(seed))?;
        let retrained = cmd_eval(paths, &paths.retrain_ckpt(seed))?;
        write_details(&baseline, &paths.eval_details(seed, "baseline"))?;
        write_details(&student, &paths.eval_details(seed, "stage1-student"))?;
        write_details(&teacher, &paths.eval_details(seed, "stage1-teacher"))?;
        write_details(&retrained, &paths.eval_details(seed, "retrained"))?;

        let count = |b: Bucket| labels.iter().filter(|l| l.bucket == b).count();
        per_seed.push(SeedReport {
            seed,
            baseline: (&baseline).into(),
            stage1_student: (&student).into(),
            stage1_teacher: (&teacher).into(),
            retrained: (&retrained).into(),
            buckets: BucketCounts {
                low: count(Bucket::Low),
                mid: count(Bucket::Mid),
                high: count(Bucket::High),
            },
        });
    }
    let mean = |f: fn(&SeedReport) -> f64| {
        per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64
    };
    let report = MetricsReport {
        config_hash: cfg.hash(),
        seeds: cfg.seeds.clone(),
        mean_baseline_miou: mean(|s| s.baseline.mean_iou),
        mean_stage1_teacher_miou: mean(|s| s.stage1_teacher.mean_iou),
        mean_retrained_miou: mean(|s| s.retrained.mean_iou),
        per_seed,
    };
    fs::write(paths.report(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationEntry {
    pub arm: String,
    pub mean_iou: f64,
    pub recall_03: f64,
    pub recall_05: f64,
    pub recall_07: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<AblationEntry>,
}

/// Trains every diagnostic arm on one seed. With `grid` the pseudo-label
/// stage runs on top of the full arm as a final entry.
pub fn cmd_ablate(cfg: &ExperimentConfig, paths: &Paths, grid: bool) -> Result<AblationReport> {
    cfg.validate()?;
    cmd_generate(cfg, paths)?;
    let split = load_or_err(paths)?;
    let seed = cfg.seeds[0];
    let arms = [
        (Stage1Arm::MtOnly, "mt-only"),
        (Stage1Arm::AugOnly, "aug-only"),
        (Stage1Arm::MtAug, "mt-aug"),
        (Stage1Arm::MtCr, "mt-cr"),
        (Stage1Arm::Full, "mt-aug-cr"),
    ];
    let mut entries = Vec::new();
    for (arm, name) in arms {
        let s1 = Stage1Config {
            arm,
            seed,
            ..cfg.stage1.clone()
        };
        let result = train_stage1(&s1, &split.train_labeled, &split.train_unlabeled, None)?;
        let m = evaluate(&result.teacher, &s1.model, &split.test)?;
        entries.push(AblationEntry {
            arm: name.into(),
            mean_iou: m.mean_iou,
            recall_03: m.recall_03,
            recall_05: m.recall_05,
            recall_07: m.recall_07,
        });
        if grid && arm == Stage1Arm::Full {
            let predictor = ModelPredictor {
                params: &result.teacher,
                cfg: &s1.model,
            };
            let labels = generate_pseudo_labels(
                &predictor,
                &split.train_unlabeled,
                &seeded_pseudo(cfg, seed),
            )?;
            let (params, _) = retrain(
                &seeded_retrain(cfg, seed),
                &split.train_labeled,
                &split.train_unlabeled,
                &labels,
                None,
            )?;
            let m = evaluate(&params, &cfg.retrain.model, &split.test)?;
            entries.push(AblationEntry {
                arm: "mt-aug-cr+pl".into(),
                mean_iou: m.mean_iou,
                recall_03: m.recall_03,
                recall_05: m.recall_05,
                recall_07: m.recall_07,
            });
        }
    }
    let report = AblationReport {
        config_hash: cfg.hash(),
        seed,
        entries,
    };
    fs::write(paths.ablation_report(), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
