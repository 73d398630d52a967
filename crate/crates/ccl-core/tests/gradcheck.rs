//! Analytic gradients versus central differences, one loss term at a time.

mod common;

use ccl_core::interval::{Interval, IntervalSet};
use ccl_core::model::{init_params, LossSpec, ModelConfig};
use ccl_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-3;

fn check_cfg() -> ModelConfig {
    ModelConfig {
        d: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn_dim: 32,
        attn_scale_init: 10.0,
        d_v: 16,
        d_q: 16,
        max_queries: 4,
    }
}

fn random_inputs(cfg: &ModelConfig, t: usize, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut video = Tensor::zeros(&[t, cfg.d_v]);
    for x in video.data.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    let mut query = Tensor::zeros(&[n, cfg.d_q]);
    for x in query.data.iter_mut() {
        *x = rng.gen_range(-1.0..1.0);
    }
    (video, query)
}

fn targets() -> IntervalSet {
    IntervalSet(vec![
        Interval::new(0.125, 0.375).unwrap(),
        Interval::new(0.625, 0.875).unwrap(),
    ])
}

fn run_check(spec: &LossSpec, label: &str) {
    let cfg = check_cfg();
    let params = init_params(&cfg, 11).unwrap();
    let (video, query) = random_inputs(&cfg, 8, 2, 42);
    let worst = common::fd_gradient_check(&params, &cfg, &video, &query, spec);
    assert!(
        worst < REL_TOL,
        "{label}: worst relative gradient error {worst:.3e} >= {REL_TOL:.0e}"
    );
}

#[test]
fn location_loss_gradients() {
    run_check(
        &LossSpec {
            loc: Some((targets(), 1.0)),
            ..Default::default()
        },
        "location",
    );
}

#[test]
fn attention_loss_gradients() {
    run_check(
        &LossSpec {
            att: Some((targets(), 1.0)),
            ..Default::default()
        },
        "attention",
    );
}

#[test]
fn contrastive_loss_gradients() {
    run_check(
        &LossSpec {
            con: Some((targets(), 0.1, 1.0)),
            ..Default::default()
        },
        "contrastive",
    );
}

#[test]
fn prediction_l1_gradients() {
    run_check(
        &LossSpec {
            pred_l1: Some((targets(), 1.0)),
            ..Default::default()
        },
        "prediction-l1",
    );
}

#[test]
fn removal_view_gradients_with_original_indices() {
    let cfg = check_cfg();
    let params = init_params(&cfg, 11).unwrap();
    let (video, query) = random_inputs(&cfg, 8, 2, 42);
    let spec = LossSpec {
        loc: Some((targets(), 1.0)),
        att: Some((targets(), 1.0)),
        ..Default::default()
    };
    let worst =
        common::fd_gradient_check_indexed(&params, &cfg, &video, &query, Some(&[1, 3]), &spec);
    assert!(
        worst < REL_TOL,
        "indexed view: worst relative gradient error {worst:.3e} >= {REL_TOL:.0e}"
    );
}
