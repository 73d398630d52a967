//! Adam with bias correction over named parameter maps.

use std::collections::BTreeMap;

use super::params::{GradMap, ModelParams};
use crate::error::{CclError, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for (name, p) in params.map.iter_mut() {
        let g = grads.get(name).ok_or_else(|| CclError::ShapeMismatch {
            name: name.clone(),
            expected: p.shape.clone(),
            got: vec![],
        })?;
        g.check_shape(name, &p.shape)?;
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        for i in 0..p.data.len() {
            m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * g.data[i];
            v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * g.data[i] * g.data[i];
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let cfg = ModelConfig::default();
        let mut p = init_params(&cfg, 0).unwrap();
        let before = p.clone();
        let zeros = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &zeros, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_against_gradient_by_about_lr() {
        let cfg = ModelConfig::default();
        let mut p = init_params(&cfg, 0).unwrap();
        let before = p.get("head.b").clone();
        let mut grads = p.zeros_like();
        grads.get_mut("head.b").unwrap().data[0] = 0.5;
        grads.get_mut("head.b").unwrap().data[1] = -2.0;
        let lr = 1e-4;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, lr).unwrap();
        let after = p.get("head.b");
        // First Adam step: delta = -lr * g / (|g| + eps'), magnitude ~ lr.
        let d0 = after.data[0] - before.data[0];
        let d1 = after.data[1] - before.data[1];
        assert!((d0 + lr).abs() < 1e-7, "d0 = {d0}");
        assert!((d1 - lr).abs() < 1e-7, "d1 = {d1}");
    }

    #[test]
    fn determinism() {
        let cfg = ModelConfig::default();
        let mut p1 = init_params(&cfg, 3).unwrap();
        let mut p2 = p1.clone();
        let mut grads = p1.zeros_like();
        for t in grads.values_mut() {
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
        }
        let mut s1 = AdamState::new(&p1);
        let mut s2 = AdamState::new(&p2);
        adam_step(&mut p1, &grads, &mut s1, 1e-3).unwrap();
        adam_step(&mut p2, &grads, &mut s2, 1e-3).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = ModelConfig::default();
        let mut p = init_params(&cfg, 0).unwrap();
        let mut grads = p.zeros_like();
        grads.insert("head.b".into(), Tensor::zeros(&[3]));
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &grads, &mut st, 1e-3).is_err());
    }
}
