//! Checkpoint files: model config, named parameters, optional optimizer
//! state and RNG counter. Floats are written with 17 significant digits so
//! the round trip is value-exact at 64-bit precision.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::adam::AdamState;
use super::params::ModelParams;
use super::ModelConfig;
use crate::error::{CclError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub opt_state: Option<AdamState>,
    pub rng_state: u64,
}

fn fmt17(x: f64) -> String {
    format!("{:.16e}", x)
}

fn write_tensor_map(out: &mut String, map: &BTreeMap<String, Tensor>) {
    out.push('{');
    for (i, (name, t)) in map.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&serde_json::to_string(name).unwrap());
        out.push_str(":{\"shape\":[");
        out.push_str(
            &t.shape
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push_str("],\"data\":[");
        for (j, v) in t.data.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt17(*v));
        }
        out.push_str("]}");
    }
    out.push('}');
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut body = String::new();
    body.push_str("{\"config\":");
    body.push_str(&serde_json::to_string(&ckpt.config)?);
    body.push_str(",\"params\":");
    write_tensor_map(&mut body, &ckpt.params.map);
    body.push_str(",\"opt_state\":");
    match &ckpt.opt_state {
        None => body.push_str("null"),
        Some(st) => {
            body.push_str(&format!("{{\"step\":{},\"m\":", st.step));
            write_tensor_map(&mut body, &st.m);
            body.push_str(",\"v\":");
            write_tensor_map(&mut body, &st.v);
            body.push('}');
        }
    }
    body.push_str(&format!(",\"rng_state\":{}}}", ckpt.rng_state));
    let mut f = fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

fn parse_tensor_map(v: &serde_json::Value) -> Result<BTreeMap<String, Tensor>> {
    let obj = v
        .as_object()
        .ok_or_else(|| CclError::Parse {
            line: 0,
            msg: "tensor map is not an object".into(),
        })?;
    let mut map = BTreeMap::new();
    for (name, entry) in obj {
        let shape: Vec<usize> = entry["shape"]
            .as_array()
            .ok_or_else(|| CclError::Parse {
                line: 0,
                msg: format!("missing shape for {name}"),
            })?
            .iter()
            .map(|s| s.as_u64().unwrap_or(0) as usize)
            .collect();
        let data: Vec<f64> = entry["data"]
            .as_array()
            .ok_or_else(|| CclError::Parse {
                line: 0,
                msg: format!("missing data for {name}"),
            })?
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN))
            .collect();
        if data.len() != shape.iter().product::<usize>() {
            return Err(CclError::Parse {
                line: 0,
                msg: format!("shape/data mismatch for {name}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CclError::NonFinite(name.clone()));
        }
        map.insert(name.clone(), Tensor { shape, data });
    }
    Ok(map)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let config: ModelConfig = serde_json::from_value(v["config"].clone())?;
    let params = ModelParams {
        map: parse_tensor_map(&v["params"])?,
    };
    let opt_state = match &v["opt_state"] {
        serde_json::Value::Null => None,
        st => Some(AdamState {
            step: st["step"].as_u64().unwrap_or(0),
            m: parse_tensor_map(&st["m"])?,
            v: parse_tensor_map(&st["v"])?,
        }),
    };
    let rng_state = v["rng_state"].as_u64().unwrap_or(0);
    Ok(Checkpoint {
        config,
        params,
        opt_state,
        rng_state,
    })
}
