//! Named parameter maps and deterministic initialization.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::error::{CclError, Result};
use crate::tensor::Tensor;

/// All learnable weights, addressable by name. The sorted map order is the
/// canonical traversal order for EMA, Adam, checkpointing and gradient
/// checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub map: BTreeMap<String, Tensor>,
}

/// Gradients share the same naming scheme as the parameters.
pub type GradMap = BTreeMap<String, Tensor>;

impl ModelParams {
    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn same_shapes(&self, other: &ModelParams) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(CclError::ShapeMismatch {
                name: "<param count>".into(),
                expected: vec![self.map.len()],
                got: vec![other.map.len()],
            });
        }
        for (name, t) in &self.map {
            let o = other.map.get(name).ok_or_else(|| CclError::ShapeMismatch {
                name: name.clone(),
                expected: t.shape.clone(),
                got: vec![],
            })?;
            o.check_shape(name, &t.shape)?;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> GradMap {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
            .collect()
    }
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}

fn linear_weight(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Tensor {
    let std = 1.0 / (in_dim as f64).sqrt();
    let mut t = Tensor::zeros(&[out_dim, in_dim]);
    for v in &mut t.data {
        *v = gauss(rng, std);
    }
    t
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d;
    let mut map = BTreeMap::new();
    let mut ins = |name: &str, t: Tensor| {
        map.insert(name.to_string(), t);
    };

    ins("proj_v.w", linear_weight(&mut rng, d, cfg.d_v));
    ins("proj_v.b", Tensor::zeros(&[d]));
    ins("proj_q.w", linear_weight(&mut rng, d, cfg.d_q));
    ins("proj_q.b", Tensor::zeros(&[d]));

    let mut query_pos = Tensor::zeros(&[cfg.max_queries, d]);
    let std = 1.0 / (d as f64).sqrt();
    for v in &mut query_pos.data {
        *v = gauss(&mut rng, std);
    }
    ins("query_pos", query_pos);

    let ones = |n: usize| Tensor {
        shape: vec![n],
        data: vec![1.0; n],
    };

    for l in 0..cfg.enc_layers {
        let p = format!("enc{l}");
        ins(&format!("{p}.ln1.g"), ones(d));
        ins(&format!("{p}.ln1.b"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            ins(&format!("{p}.attn.{w}"), linear_weight(&mut rng, d, d));
        }
        ins(&format!("{p}.ln2.g"), ones(d));
        ins(&format!("{p}.ln2.b"), Tensor::zeros(&[d]));
        ins(&format!("{p}.ffn.w1"), linear_weight(&mut rng, cfg.ffn_dim, d));
        ins(&format!("{p}.ffn.b1"), Tensor::zeros(&[cfg.ffn_dim]));
        ins(&format!("{p}.ffn.w2"), linear_weight(&mut rng, d, cfg.ffn_dim));
        ins(&format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
    }
    ins("enc_ln.g", ones(d));
    ins("enc_ln.b", Tensor::zeros(&[d]));

    for l in 0..cfg.dec_layers {
        let p = format!("dec{l}");
        ins(&format!("{p}.ln1.g"), ones(d));
        ins(&format!("{p}.ln1.b"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            ins(&format!("{p}.self.{w}"), linear_weight(&mut rng, d, d));
        }
        ins(&format!("{p}.ln2.g"), ones(d));
        ins(&format!("{p}.ln2.b"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            ins(&format!("{p}.cross.{w}"), linear_weight(&mut rng, d, d));
        }
        ins(&format!("{p}.cross.scale"), Tensor::scalar(cfg.attn_scale_init));
        ins(&format!("{p}.ln3.g"), ones(d));
        ins(&format!("{p}.ln3.b"), Tensor::zeros(&[d]));
        ins(&format!("{p}.ffn.w1"), linear_weight(&mut rng, cfg.ffn_dim, d));
        ins(&format!("{p}.ffn.b1"), Tensor::zeros(&[cfg.ffn_dim]));
        ins(&format!("{p}.ffn.w2"), linear_weight(&mut rng, d, cfg.ffn_dim));
        ins(&format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
    }
    ins("dec_ln.g", ones(d));
    ins("dec_ln.b", Tensor::zeros(&[d]));

    ins("head.w", linear_weight(&mut rng, 2, d));
    ins("head.b", Tensor::zeros(&[2]));

    Ok(ModelParams { map })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_dim_shapes() {
        let cfg = ModelConfig {
            d: 16,
            heads: 4,
            ..Default::default()
        };
        assert_eq!(cfg.head_dim(), 4);
        let p = init_params(&cfg, 0).unwrap();
        assert_eq!(p.get("enc0.attn.wq").shape, vec![16, 16]);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            d: 15,
            heads: 4,
            ..Default::default()
        };
        assert!(init_params(&cfg, 0).is_err());
    }
}
