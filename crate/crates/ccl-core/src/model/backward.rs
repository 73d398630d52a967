//! Manual reverse pass. Mirrors `forward` layer by layer; verified against
//! central finite differences in the gradcheck tests.

use super::forward::{gelu_grad, ForwardOutput};
use super::losses::{assemble_losses, LossSpec, LossValues, OutputGrads};
use super::params::{GradMap, ModelParams};
use super::ModelConfig;
use crate::error::Result;
use crate::tensor::{cosine_backward, softmax_backward, Tensor};

struct GradSink {
    map: GradMap,
}

impl GradSink {
    fn new(params: &ModelParams) -> Self {
        GradSink {
            map: params.zeros_like(),
        }
    }

    fn add(&mut self, name: &str, grad: &Tensor) {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown grad target `{name}`"))
            .add_assign(grad);
    }

    fn add_scalar(&mut self, name: &str, grad: f64) {
        self.map.get_mut(name).unwrap().data[0] += grad;
    }
}

fn colsum(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[x.cols()]);
    for i in 0..x.rows() {
        for (o, v) in out.data.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    out
}

/// Backward through `y = g * xhat + b` layer norm. Returns dx; accumulates
/// dg/db into the sink.
fn layer_norm_backward(
    d_out: &Tensor,
    cache: &super::forward::LnCache,
    g: &Tensor,
    sink: &mut GradSink,
    g_name: &str,
    b_name: &str,
) -> Tensor {
    let (r, c) = (d_out.rows(), d_out.cols());
    let mut dg = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let xhat = cache.xhat.row(i);
        let dy = d_out.row(i);
        let mut dxhat = vec![0.0; c];
        for j in 0..c {
            dg.data[j] += dy[j] * xhat[j];
            dxhat[j] = dy[j] * g.data[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        let rstd = cache.rstd[i];
        for j in 0..c {
            *dx.at_mut(i, j) = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    sink.add(g_name, &dg);
    sink.add(b_name, &colsum(d_out));
    dx
}

/// Backward through `out = x * W^T (+ b)`; returns dx.
fn linear_backward(
    d_out: &Tensor,
    x: &Tensor,
    params: &ModelParams,
    w_name: &str,
    b_name: Option<&str>,
    sink: &mut GradSink,
) -> Tensor {
    sink.add(w_name, &d_out.t_matmul(x));
    if let Some(b) = b_name {
        sink.add(b, &colsum(d_out));
    }
    d_out.matmul(params.get(w_name))
}

/// Backward through scaled-dot multi-head attention (queries from `q_src`,
/// keys/values from the cached kv source). Returns (d_q_src, d_kv_src).
fn dot_attention_backward(
    d_ctx: &Tensor,
    cache: &super::forward::DotAttnCache,
    params: &ModelParams,
    prefix: &str,
    heads: usize,
    q_src: &Tensor,
    sink: &mut GradSink,
) -> (Tensor, Tensor) {
    let d = d_ctx.cols();
    let dh = d / heads;
    let (r, c) = (cache.q.rows(), cache.k.rows());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_q = Tensor::zeros(&[r, d]);
    let mut d_k = Tensor::zeros(&[c, d]);
    let mut d_v = Tensor::zeros(&[c, d]);
    for h in 0..heads {
        let a = &cache.attn[h];
        let range = h * dh..(h + 1) * dh;
        for i in 0..r {
            let d_ctx_i = &d_ctx.row(i)[range.clone()];
            let mut d_a = vec![0.0; c];
            for j in 0..c {
                let vj = &cache.v.row(j)[range.clone()];
                d_a[j] = crate::tensor::dot(d_ctx_i, vj);
                let w = a.at(i, j);
                let dvj = &mut d_v.row_mut(j)[range.clone()];
                for (o, x) in dvj.iter_mut().zip(d_ctx_i) {
                    *o += w * x;
                }
            }
            let mut d_logits = vec![0.0; c];
            softmax_backward(a.row(i), &d_a, &mut d_logits);
            let qi: Vec<f64> = cache.q.row(i)[range.clone()].to_vec();
            let dqi = &mut d_q.row_mut(i)[range.clone()];
            for j in 0..c {
                let dl = d_logits[j] * scale;
                if dl == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[range.clone()];
                for (o, x) in dqi.iter_mut().zip(kj) {
                    *o += dl * x;
                }
                let dkj = &mut d_k.row_mut(j)[range.clone()];
                for (o, x) in dkj.iter_mut().zip(&qi) {
                    *o += dl * x;
                }
            }
        }
    }
    let d_q_src = linear_backward(&d_q, q_src, params, &format!("{prefix}.wq"), None, sink);
    let mut d_kv = linear_backward(&d_k, &cache.src, params, &format!("{prefix}.wk"), None, sink);
    d_kv.add_assign(&linear_backward(
        &d_v,
        &cache.src,
        params,
        &format!("{prefix}.wv"),
        None,
        sink,
    ));
    (d_q_src, d_kv)
}

/// Backward through cosine cross-attention. `d_attn_mean` is the upstream
/// gradient on the head-averaged attention (from the attention loss).
/// Returns (d_q_src, d_kv_src).
#[allow(clippy::too_many_arguments)]
fn cross_attention_backward(
    d_ctx: &Tensor,
    d_attn_mean: &Tensor,
    cache: &super::forward::CrossAttnCache,
    params: &ModelParams,
    prefix: &str,
    heads: usize,
    kv_src: &Tensor,
    sink: &mut GradSink,
) -> (Tensor, Tensor) {
    let d = d_ctx.cols();
    let dh = d / heads;
    let (r, c) = (cache.q.rows(), cache.k.rows());
    let scale = params.get(&format!("{prefix}.scale")).value();
    let mut d_scale = 0.0;
    let mut d_q = Tensor::zeros(&[r, d]);
    let mut d_k = Tensor::zeros(&[c, d]);
    let mut d_v = Tensor::zeros(&[c, d]);
    let head_avg = 1.0 / heads as f64;
    for h in 0..heads {
        let a = &cache.attn[h];
        let cos = &cache.cos[h];
        let range = h * dh..(h + 1) * dh;
        for i in 0..r {
            let d_ctx_i = &d_ctx.row(i)[range.clone()];
            let mut d_a = vec![0.0; c];
            for j in 0..c {
                let vj = &cache.v.row(j)[range.clone()];
                d_a[j] = crate::tensor::dot(d_ctx_i, vj) + head_avg * d_attn_mean.at(i, j);
                let w = a.at(i, j);
                let dvj = &mut d_v.row_mut(j)[range.clone()];
                for (o, x) in dvj.iter_mut().zip(d_ctx_i) {
                    *o += w * x;
                }
            }
            let mut d_logits = vec![0.0; c];
            softmax_backward(a.row(i), &d_a, &mut d_logits);
            for j in 0..c {
                let dl = d_logits[j];
                if dl == 0.0 {
                    continue;
                }
                d_scale += dl * cos.at(i, j);
                let d_cos = dl * scale;
                let qi: Vec<f64> = cache.q.row(i)[range.clone()].to_vec();
                let kj: Vec<f64> = cache.k.row(j)[range.clone()].to_vec();
                let dqi = &mut d_q.row_mut(i)[range.clone()];
                let mut dq_tmp = vec![0.0; dh];
                let mut dk_tmp = vec![0.0; dh];
                cosine_backward(&qi, &kj, d_cos, &mut dq_tmp, &mut dk_tmp);
                for (o, x) in dqi.iter_mut().zip(&dq_tmp) {
                    *o += x;
                }
                let dkj = &mut d_k.row_mut(j)[range.clone()];
                for (o, x) in dkj.iter_mut().zip(&dk_tmp) {
                    *o += x;
                }
            }
        }
    }
    sink.add_scalar(&format!("{prefix}.scale"), d_scale);
    let d_q_src = linear_backward(&d_q, &cache.q_src, params, &format!("{prefix}.wq"), None, sink);
    let mut d_kv = linear_backward(&d_k, kv_src, params, &format!("{prefix}.wk"), None, sink);
    d_kv.add_assign(&linear_backward(
        &d_v,
        kv_src,
        params,
        &format!("{prefix}.wv"),
        None,
        sink,
    ));
    (d_q_src, d_kv)
}

/// Backward through the two-layer GELU FFN; returns d(input).
fn ffn_backward(
    d_out: &Tensor,
    cache: &super::forward::FfnCache,
    params: &ModelParams,
    prefix: &str,
    sink: &mut GradSink,
) -> Tensor {
    let d_act = linear_backward(
        d_out,
        &cache.act,
        params,
        &format!("{prefix}.w2"),
        Some(&format!("{prefix}.b2")),
        sink,
    );
    let mut d_pre = d_act;
    for (dp, pre) in d_pre.data.iter_mut().zip(&cache.pre.data) {
        *dp *= gelu_grad(*pre);
    }
    linear_backward(
        &d_pre,
        &cache.src,
        params,
        &format!("{prefix}.w1"),
        Some(&format!("{prefix}.b1")),
        sink,
    )
}

pub(crate) fn backward_from_outputs(
    params: &ModelParams,
    cfg: &ModelConfig,
    out: &ForwardOutput,
    up: &OutputGrads,
) -> GradMap {
    let cache = &out.cache;
    let nq = out.intervals.len();
    let mut sink = GradSink::new(params);

    // Interval head: (start, end) -> (center, width) -> logits.
    let mut d_head_y = Tensor::zeros(&[nq, 2]);
    for i in 0..nq {
        let ds = if cache.start_open[i] {
            up.d_intervals.at(i, 0)
        } else {
            0.0
        };
        let de = if cache.end_open[i] {
            up.d_intervals.at(i, 1)
        } else {
            0.0
        };
        let dc = ds + de;
        let dw = 0.5 * (de - ds);
        let c = cache.centers[i];
        let w = cache.widths[i];
        *d_head_y.at_mut(i, 0) = dc * c * (1.0 - c);
        *d_head_y.at_mut(i, 1) = dw * w * (1.0 - w);
    }
    let dec_ln_out = {
        // Recompute the dec_ln output for the head's weight gradient.
        let g = params.get("dec_ln.g");
        let b = params.get("dec_ln.b");
        let mut t = cache.dec_ln.xhat.clone();
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                *t.at_mut(i, j) = g.data[j] * t.at(i, j) + b.data[j];
            }
        }
        t
    };
    let d_dec_out = linear_backward(
        &d_head_y,
        &dec_ln_out,
        params,
        "head.w",
        Some("head.b"),
        &mut sink,
    );
    let mut d_dq =
        layer_norm_backward(&d_dec_out, &cache.dec_ln, params.get("dec_ln.g"), &mut sink, "dec_ln.g", "dec_ln.b");

    let t = out.v_enc.rows();
    let mut d_v_enc = up.d_v_enc.clone();
    d_v_enc.check_shape("d_v_enc", &[t, cfg.d]).unwrap();

    // Decoder layers, reversed.
    for l in (0..cfg.dec_layers).rev() {
        let p = format!("dec{l}");
        let lc = &cache.dec_layers[l];

        // FFN block: h_out = h_mid2 + W2 gelu(W1 ln3(h_mid2) + b1) + b2
        let d_n3 = ffn_backward(&d_dq, &lc.ffn, params, &format!("{p}.ffn"), &mut sink);
        let dx = layer_norm_backward(
            &d_n3,
            &lc.ln3,
            params.get(&format!("{p}.ln3.g")),
            &mut sink,
            &format!("{p}.ln3.g"),
            &format!("{p}.ln3.b"),
        );
        d_dq.add_assign(&dx);

        // Cross-attention block.
        let d_ctx = linear_backward(
            &d_dq,
            &lc.cross.ctx,
            params,
            &format!("{p}.cross.wo"),
            None,
            &mut sink,
        );
        let (d_n2, d_kv) = cross_attention_backward(
            &d_ctx,
            &up.d_attn[l],
            &lc.cross,
            params,
            &format!("{p}.cross"),
            cfg.heads,
            &out.v_enc,
            &mut sink,
        );
        d_v_enc.add_assign(&d_kv);
        let dx = layer_norm_backward(
            &d_n2,
            &lc.ln2,
            params.get(&format!("{p}.ln2.g")),
            &mut sink,
            &format!("{p}.ln2.g"),
            &format!("{p}.ln2.b"),
        );
        d_dq.add_assign(&dx);

        // Self-attention block.
        let d_ctx = linear_backward(
            &d_dq,
            &lc.self_attn.ctx,
            params,
            &format!("{p}.self.wo"),
            None,
            &mut sink,
        );
        let (d_n1_q, d_n1_kv) = dot_attention_backward(
            &d_ctx,
            &lc.self_attn,
            params,
            &format!("{p}.self"),
            cfg.heads,
            &lc.self_attn.src,
            &mut sink,
        );
        let mut d_n1 = d_n1_q;
        d_n1.add_assign(&d_n1_kv);
        let dx = layer_norm_backward(
            &d_n1,
            &lc.ln1,
            params.get(&format!("{p}.ln1.g")),
            &mut sink,
            &format!("{p}.ln1.g"),
            &format!("{p}.ln1.b"),
        );
        d_dq.add_assign(&dx);
    }

    // Decoder input: f_q_proj + query_pos rows, gathered at the sentence
    // indices the forward pass used.
    let mut d_qpos = Tensor::zeros(&[cfg.max_queries, cfg.d]);
    for i in 0..nq {
        d_qpos
            .row_mut(cache.query_indices[i])
            .copy_from_slice(d_dq.row(i));
    }
    sink.add("query_pos", &d_qpos);
    let mut d_f_q = d_dq;
    d_f_q.add_assign(&up.d_f_q_proj);
    linear_backward(
        &d_f_q,
        &cache.query_feats,
        params,
        "proj_q.w",
        Some("proj_q.b"),
        &mut sink,
    );

    // Encoder final norm.
    let mut d_h = layer_norm_backward(
        &d_v_enc,
        &cache.enc_ln,
        params.get("enc_ln.g"),
        &mut sink,
        "enc_ln.g",
        "enc_ln.b",
    );

    for l in (0..cfg.enc_layers).rev() {
        let p = format!("enc{l}");
        let lc = &cache.enc_layers[l];

        let d_n2 = ffn_backward(&d_h, &lc.ffn, params, &format!("{p}.ffn"), &mut sink);
        let dx = layer_norm_backward(
            &d_n2,
            &lc.ln2,
            params.get(&format!("{p}.ln2.g")),
            &mut sink,
            &format!("{p}.ln2.g"),
            &format!("{p}.ln2.b"),
        );
        d_h.add_assign(&dx);

        let d_ctx = linear_backward(
            &d_h,
            &lc.attn.ctx,
            params,
            &format!("{p}.attn.wo"),
            None,
            &mut sink,
        );
        let (d_n1_q, d_n1_kv) = dot_attention_backward(
            &d_ctx,
            &lc.attn,
            params,
            &format!("{p}.attn"),
            cfg.heads,
            &lc.attn.src,
            &mut sink,
        );
        let mut d_n1 = d_n1_q;
        d_n1.add_assign(&d_n1_kv);
        let dx = layer_norm_backward(
            &d_n1,
            &lc.ln1,
            params.get(&format!("{p}.ln1.g")),
            &mut sink,
            &format!("{p}.ln1.g"),
            &format!("{p}.ln1.b"),
        );
        d_h.add_assign(&dx);
    }

    // Position encodings are fixed; only the projection learns.
    linear_backward(
        &d_h,
        &cache.video_feats,
        params,
        "proj_v.w",
        Some("proj_v.b"),
        &mut sink,
    );

    sink.map
}

/// Forward plus backward for a composite loss. Returns the loss values and a
/// gradient for every parameter.
pub fn forward_backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    video_feats: &Tensor,
    query_feats: &Tensor,
    spec: &LossSpec,
) -> Result<(LossValues, GradMap, ForwardOutput)> {
    forward_backward_with_indices(params, cfg, video_feats, query_feats, None, spec)
}

/// `forward_backward` over a view whose query rows carry the given original
/// sentence indices; see `forward_with_indices`.
pub fn forward_backward_with_indices(
    params: &ModelParams,
    cfg: &ModelConfig,
    video_feats: &Tensor,
    query_feats: &Tensor,
    query_indices: Option<&[usize]>,
    spec: &LossSpec,
) -> Result<(LossValues, GradMap, ForwardOutput)> {
    let out = super::forward::forward_with_indices(
        params,
        cfg,
        video_feats,
        query_feats,
        query_indices,
    )?;
    let (values, up) = assemble_losses(&out, spec)?;
    let grads = backward_from_outputs(params, cfg, &out, &up);
    Ok((values, grads, out))
}
