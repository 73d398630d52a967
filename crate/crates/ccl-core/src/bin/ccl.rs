//! Command-line driver for the grounding experiments.
//!
//! Exit codes: 0 on success, 2 when training diverges, 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccl_core::error::CclError;
use ccl_core::experiment::{
    cmd_ablate, cmd_baseline, cmd_eval, cmd_generate, cmd_pseudo_label, cmd_retrain, cmd_run,
    cmd_train_stage1, ExperimentConfig, Paths,
};
use ccl_core::interval::iou;
use ccl_core::model::checkpoint::load_checkpoint;
use ccl_core::model::forward;
use ccl_core::synthetic::load_dataset;

#[derive(Parser)]
#[command(name = "ccl", about = "Semi-supervised video paragraph grounding experiments")]
struct Cli {
    /// Experiment configuration (JSON). Omit to use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root for datasets, checkpoints, logs, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the benchmark dataset.
    Generate,
    /// Run the teacher-student stage for one seed.
    TrainStage1 {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score unlabeled samples with the trained teacher.
    PseudoLabel {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Retrain from scratch on ground truth plus kept pseudo-labels.
    Retrain {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the labeled-only reference model.
    Baseline {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Full pipeline over all configured seeds, writing report.json.
    Run,
    /// Inspect a checkpoint: summary, optional parameter diff, optional
    /// per-sample prediction.
    Dump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        #[arg(long)]
        sample: Option<String>,
    },
    /// Train every diagnostic arm; with --grid also the pseudo-label stage.
    Ablate {
        #[arg(long)]
        grid: bool,
    },
}

fn load_config(cli: &Cli) -> ccl_core::error::Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::from_file(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: &Cli) -> ccl_core::error::Result<()> {
    let paths = Paths::new(&cli.out);
    match &cli.cmd {
        Cmd::Generate => cmd_generate(&load_config(cli)?, &paths),
        Cmd::TrainStage1 { seed } => cmd_train_stage1(&load_config(cli)?, &paths, *seed),
        Cmd::PseudoLabel { seed } => {
            let labels = cmd_pseudo_label(&load_config(cli)?, &paths, *seed)?;
            println!("{} pseudo-labels written", labels.len());
            Ok(())
        }
        Cmd::Retrain { seed } => cmd_retrain(&load_config(cli)?, &paths, *seed),
        Cmd::Baseline { seed } => cmd_baseline(&load_config(cli)?, &paths, *seed),
        Cmd::Eval { ckpt } => {
            let m = cmd_eval(&paths, ckpt)?;
            println!(
                "{{\"mean_iou\":{:.6},\"recall_03\":{:.6},\"recall_05\":{:.6},\"recall_07\":{:.6}}}",
                m.mean_iou, m.recall_03, m.recall_05, m.recall_07
            );
            Ok(())
        }
        Cmd::Run => {
            let report = cmd_run(&load_config(cli)?, &paths)?;
            println!(
                "baseline mIoU {:.4} | stage1 teacher mIoU {:.4} | retrained mIoU {:.4}",
                report.mean_baseline_miou,
                report.mean_stage1_teacher_miou,
                report.mean_retrained_miou
            );
            Ok(())
        }
        Cmd::Dump {
            ckpt,
            ckpt2,
            sample,
        } => {
            let a = load_checkpoint(ckpt)?;
            let scalars = a.params.num_scalars();
            println!(
                "checkpoint: {} tensors, {} scalars, d={}, {}+{} layers",
                a.params.map.len(),
                scalars,
                a.config.d,
                a.config.enc_layers,
                a.config.dec_layers
            );
            if let Some(p2) = ckpt2 {
                let b = load_checkpoint(p2)?;
                a.params.same_shapes(&b.params)?;
                let mut max_diff = 0.0f64;
                for (name, t) in &a.params.map {
                    for (x, y) in t.data.iter().zip(&b.params.map[name].data) {
                        max_diff = max_diff.max((x - y).abs());
                    }
                }
                println!("max |param diff| vs {}: {:.6e}", p2.display(), max_diff);
            }
            if let Some(id) = sample {
                let (split, _) = load_dataset(&paths.dataset())?;
                let s = split
                    .find(id)
                    .ok_or_else(|| CclError::UnknownSample(id.clone()))?;
                let pred_a = forward(&a.params, &a.config, &s.video_feats, &s.query_feats)?.intervals;
                let pred_b = match ckpt2 {
                    Some(p2) => {
                        let b = load_checkpoint(p2)?;
                        Some(forward(&b.params, &b.config, &s.video_feats, &s.query_feats)?.intervals)
                    }
                    None => None,
                };
                let fmt = |iv: ccl_core::interval::Interval, gt: Option<ccl_core::interval::Interval>| match gt {
                    Some(g) => format!("[{:.4}, {:.4}] iou {:.4}", iv.start, iv.end, iou(iv, g)),
                    None => format!("[{:.4}, {:.4}]", iv.start, iv.end),
                };
                for i in 0..s.num_sentences() {
                    let gt = s.gt_intervals.as_ref().map(|g| g.0[i]);
                    match gt {
                        Some(g) => println!("{id} sentence {i} gt:    [{:.4}, {:.4}]", g.start, g.end),
                        None => println!("{id} sentence {i} gt:    absent"),
                    }
                    println!("{id} sentence {i} model: {}", fmt(pred_a.0[i], gt));
                    if let Some(pb) = &pred_b {
                        println!("{id} sentence {i} second: {}", fmt(pb.0[i], gt));
                    }
                }
            }
            Ok(())
        }
        Cmd::Ablate { grid } => {
            let report = cmd_ablate(&load_config(cli)?, &paths, *grid)?;
            for e in &report.entries {
                println!("{:<14} mIoU {:.4} R@0.5 {:.4}", e.arm, e.mean_iou, e.recall_05);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CclError::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
