//! Helpers shared by the integration test targets.

use ccl_core::model::{forward_backward_with_indices, LossSpec, ModelConfig, ModelParams};
use ccl_core::tensor::Tensor;

/// Central-difference gradient check for one loss spec. Returns the worst
/// relative error over all parameter scalars.
pub fn fd_gradient_check(
    params: &ModelParams,
    cfg: &ModelConfig,
    video: &Tensor,
    query: &Tensor,
    spec: &LossSpec,
) -> f64 {
    fd_gradient_check_indexed(params, cfg, video, query, None, spec)
}

/// As `fd_gradient_check`, over a view carrying explicit sentence indices.
pub fn fd_gradient_check_indexed(
    params: &ModelParams,
    cfg: &ModelConfig,
    video: &Tensor,
    query: &Tensor,
    indices: Option<&[usize]>,
    spec: &LossSpec,
) -> f64 {
    const STEP: f64 = 1e-5;
    const DENOM_GUARD: f64 = 1e-8;

    let (_, grads, _) =
        forward_backward_with_indices(params, cfg, video, query, indices, spec).unwrap();
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let names: Vec<String> = params.map.keys().cloned().collect();
    for name in &names {
        let len = params.get(name).data.len();
        for i in 0..len {
            let orig = probe.map.get(name).unwrap().data[i];
            probe.map.get_mut(name).unwrap().data[i] = orig + STEP;
            let (plus, _, _) =
                forward_backward_with_indices(&probe, cfg, video, query, indices, spec).unwrap();
            probe.map.get_mut(name).unwrap().data[i] = orig - STEP;
            let (minus, _, _) =
                forward_backward_with_indices(&probe, cfg, video, query, indices, spec).unwrap();
            probe.map.get_mut(name).unwrap().data[i] = orig;
            let fd = (plus.total - minus.total) / (2.0 * STEP);
            let an = grads.get(name).unwrap().data[i];
            let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(DENOM_GUARD);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
