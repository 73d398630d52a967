//! Forward pass with a full intermediate cache for manual backprop.

use super::params::ModelParams;
use super::ModelConfig;
use crate::error::{CclError, Result};
use crate::interval::{Interval, IntervalSet};
use crate::tensor::{cosine, softmax_inplace, Tensor};

/// Layer norm epsilon.
const LN_EPS: f64 = 1e-5;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Tanh-form GELU; smooth everywhere, which keeps finite-difference
/// gradient checks clean.
pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    /// Normalized input (x - mean) * rstd, per row.
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct DotAttnCache {
    pub src: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-head attention, rows x cols.
    pub attn: Vec<Tensor>,
    pub ctx: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct CrossAttnCache {
    pub q_src: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Per-head cosine similarities, Nq x T.
    pub cos: Vec<Tensor>,
    pub attn: Vec<Tensor>,
    pub ctx: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnCache {
    pub src: Tensor,
    pub pre: Tensor,
    pub act: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayerCache {
    pub ln1: LnCache,
    pub attn: DotAttnCache,
    pub ln2: LnCache,
    pub ffn: FfnCache,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayerCache {
    pub ln1: LnCache,
    pub self_attn: DotAttnCache,
    pub ln2: LnCache,
    pub cross: CrossAttnCache,
    pub ln3: LnCache,
    pub ffn: FfnCache,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub video_feats: Tensor,
    pub query_feats: Tensor,
    pub enc_layers: Vec<EncLayerCache>,
    pub enc_ln: LnCache,
    pub dec_layers: Vec<DecLayerCache>,
    pub dec_ln: LnCache,
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    /// Whether start/end survived the [0, 1] clamp unclamped.
    pub start_open: Vec<bool>,
    pub end_open: Vec<bool>,
    /// Sentence-index embedding row used by each query row.
    pub query_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub intervals: IntervalSet,
    /// Encoded clip features, T x D.
    pub v_enc: Tensor,
    /// Head-averaged cross-attention per decoder layer, each Nq x T.
    pub attn: Vec<Tensor>,
    /// Projected query features before position embeddings, Nq x D.
    pub f_q_proj: Tensor,
    pub(crate) cache: ForwardCache,
}

fn check_finite(t: &Tensor, where_: &str) -> Result<()> {
    if !t.all_finite() {
        return Err(CclError::NonFinite(where_.to_string()));
    }
    Ok(())
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> (Tensor, LnCache) {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    let mut xhat = Tensor::zeros(&[r, c]);
    let mut rstd = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let xh = (row[j] - mean) * rs;
            *xhat.at_mut(i, j) = xh;
            *out.at_mut(i, j) = g.data[j] * xh + b.data[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut out = x.matmul_t(w);
    if let Some(b) = b {
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
    }
    out
}

fn split_head<'a>(x: &'a Tensor, h: usize, dh: usize, row: usize) -> &'a [f64] {
    &x.row(row)[h * dh..(h + 1) * dh]
}

/// Standard scaled-dot multi-head attention; queries from `q_src`, keys and
/// values from `kv_src` (equal for self-attention).
fn dot_attention(
    q_src: &Tensor,
    kv_src: &Tensor,
    p: &ModelParams,
    prefix: &str,
    heads: usize,
) -> DotAttnCache {
    let d = q_src.cols();
    let dh = d / heads;
    let q = linear(q_src, p.get(&format!("{prefix}.wq")), None);
    let k = linear(kv_src, p.get(&format!("{prefix}.wk")), None);
    let v = linear(kv_src, p.get(&format!("{prefix}.wv")), None);
    let (r, c) = (q.rows(), k.rows());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = Vec::with_capacity(heads);
    let mut ctx = Tensor::zeros(&[r, d]);
    for h in 0..heads {
        let mut a = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let qi = split_head(&q, h, dh, i);
            for j in 0..c {
                *a.at_mut(i, j) = scale * crate::tensor::dot(qi, split_head(&k, h, dh, j));
            }
            softmax_inplace(a.row_mut(i));
            for j in 0..c {
                let w = a.at(i, j);
                let vj = split_head(&v, h, dh, j);
                let out = &mut ctx.row_mut(i)[h * dh..(h + 1) * dh];
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        attn.push(a);
    }
    DotAttnCache {
        src: kv_src.clone(),
        q,
        k,
        v,
        attn,
        ctx,
    }
}

/// Cross-attention with cosine-similarity logits scaled by a learnable
/// per-layer scalar. Invariant to positive rescaling of queries or keys.
fn cosine_cross_attention(
    q_src: &Tensor,
    kv_src: &Tensor,
    p: &ModelParams,
    prefix: &str,
    heads: usize,
) -> Result<CrossAttnCache> {
    let d = q_src.cols();
    let dh = d / heads;
    let q = linear(q_src, p.get(&format!("{prefix}.wq")), None);
    let k = linear(kv_src, p.get(&format!("{prefix}.wk")), None);
    let v = linear(kv_src, p.get(&format!("{prefix}.wv")), None);
    let scale = p.get(&format!("{prefix}.scale")).value();
    let (r, c) = (q.rows(), k.rows());
    let mut cos_all = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    let mut ctx = Tensor::zeros(&[r, d]);
    for h in 0..heads {
        let mut cs = Tensor::zeros(&[r, c]);
        let mut a = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let qi = split_head(&q, h, dh, i);
            for j in 0..c {
                let cv = cosine(qi, split_head(&k, h, dh, j), i)?;
                *cs.at_mut(i, j) = cv;
                *a.at_mut(i, j) = scale * cv;
            }
            softmax_inplace(a.row_mut(i));
            for j in 0..c {
                let w = a.at(i, j);
                let vj = split_head(&v, h, dh, j);
                let out = &mut ctx.row_mut(i)[h * dh..(h + 1) * dh];
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        cos_all.push(cs);
        attn.push(a);
    }
    Ok(CrossAttnCache {
        q_src: q_src.clone(),
        q,
        k,
        v,
        cos: cos_all,
        attn,
        ctx,
    })
}

fn ffn(x: &Tensor, p: &ModelParams, prefix: &str) -> FfnCache {
    let pre = linear(
        x,
        p.get(&format!("{prefix}.w1")),
        Some(p.get(&format!("{prefix}.b1"))),
    );
    let mut act = pre.clone();
    for v in &mut act.data {
        *v = gelu(*v);
    }
    FfnCache {
        src: x.clone(),
        pre,
        act,
    }
}

fn ffn_out(cache: &FfnCache, p: &ModelParams, prefix: &str) -> Tensor {
    linear(
        &cache.act,
        p.get(&format!("{prefix}.w2")),
        Some(p.get(&format!("{prefix}.b2"))),
    )
}

/// Fixed sinusoidal clip-position encodings, T x D.
pub(crate) fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for j in 0..t {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            *pe.at_mut(j, 2 * i) = (j as f64 * freq).sin();
            *pe.at_mut(j, 2 * i + 1) = (j as f64 * freq).cos();
        }
    }
    pe
}

pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    video_feats: &Tensor,
    query_feats: &Tensor,
) -> Result<ForwardOutput> {
    forward_with_indices(params, cfg, video_feats, query_feats, None)
}

/// Forward pass where query row i carries the sentence-index embedding of
/// `query_indices[i]` instead of i. Removal views pass the kept original
/// indices, so a surviving sentence keeps its positional identity and the
/// view stays consistent with the full paragraph.
pub fn forward_with_indices(
    params: &ModelParams,
    cfg: &ModelConfig,
    video_feats: &Tensor,
    query_feats: &Tensor,
    query_indices: Option<&[usize]>,
) -> Result<ForwardOutput> {
    video_feats.check_shape("video_feats", &[video_feats.rows(), cfg.d_v])?;
    query_feats.check_shape("query_feats", &[query_feats.rows(), cfg.d_q])?;
    let nq = query_feats.rows();
    if nq == 0 || nq > cfg.max_queries {
        return Err(CclError::InvalidConfig(format!(
            "query count {nq} outside [1, {}]",
            cfg.max_queries
        )));
    }
    let qidx: Vec<usize> = match query_indices {
        None => (0..nq).collect(),
        Some(ix) => {
            if ix.len() != nq {
                return Err(CclError::LengthMismatch {
                    left: ix.len(),
                    right: nq,
                });
            }
            if ix.iter().any(|&i| i >= cfg.max_queries)
                || ix.windows(2).any(|w| w[0] >= w[1])
            {
                return Err(CclError::InvalidConfig(format!(
                    "query indices must be strictly increasing and below {}",
                    cfg.max_queries
                )));
            }
            ix.to_vec()
        }
    };
    let t = video_feats.rows();

    // Encoder
    let f_v = linear(video_feats, params.get("proj_v.w"), Some(params.get("proj_v.b")));
    let pos = sinusoidal_positions(t, cfg.d);
    let mut h = f_v;
    h.add_assign(&pos);
    check_finite(&h, "proj_v")?;

    let mut enc_caches = Vec::with_capacity(cfg.enc_layers);
    for l in 0..cfg.enc_layers {
        let p = format!("enc{l}");
        let (n1, ln1) = layer_norm(&h, params.get(&format!("{p}.ln1.g")), params.get(&format!("{p}.ln1.b")));
        let attn = dot_attention(&n1, &n1, params, &format!("{p}.attn"), cfg.heads);
        let o = linear(&attn.ctx, params.get(&format!("{p}.attn.wo")), None);
        h.add_assign(&o);
        let (n2, ln2) = layer_norm(&h, params.get(&format!("{p}.ln2.g")), params.get(&format!("{p}.ln2.b")));
        let f = ffn(&n2, params, &format!("{p}.ffn"));
        h.add_assign(&ffn_out(&f, params, &format!("{p}.ffn")));
        check_finite(&h, &p)?;
        enc_caches.push(EncLayerCache {
            ln1,
            attn,
            ln2,
            ffn: f,
        });
    }
    let (v_enc, enc_ln) = layer_norm(&h, params.get("enc_ln.g"), params.get("enc_ln.b"));
    check_finite(&v_enc, "enc_ln")?;

    // Decoder
    let f_q_proj = linear(query_feats, params.get("proj_q.w"), Some(params.get("proj_q.b")));
    let qpos = params.get("query_pos");
    let mut dq = f_q_proj.clone();
    for i in 0..nq {
        let row = dq.row_mut(i);
        for (v, pv) in row.iter_mut().zip(qpos.row(qidx[i])) {
            *v += pv;
        }
    }
    check_finite(&dq, "proj_q")?;

    let mut dec_caches = Vec::with_capacity(cfg.dec_layers);
    let mut attn_out = Vec::with_capacity(cfg.dec_layers);
    for l in 0..cfg.dec_layers {
        let p = format!("dec{l}");
        let (n1, ln1) = layer_norm(&dq, params.get(&format!("{p}.ln1.g")), params.get(&format!("{p}.ln1.b")));
        let self_attn = dot_attention(&n1, &n1, params, &format!("{p}.self"), cfg.heads);
        let o = linear(&self_attn.ctx, params.get(&format!("{p}.self.wo")), None);
        dq.add_assign(&o);
        let (n2, ln2) = layer_norm(&dq, params.get(&format!("{p}.ln2.g")), params.get(&format!("{p}.ln2.b")));
        let cross = cosine_cross_attention(&n2, &v_enc, params, &format!("{p}.cross"), cfg.heads)?;
        let o = linear(&cross.ctx, params.get(&format!("{p}.cross.wo")), None);
        dq.add_assign(&o);

        // Head-averaged cross-attention for this layer.
        let mut mean_attn = Tensor::zeros(&[nq, t]);
        for a in &cross.attn {
            mean_attn.add_assign(a);
        }
        mean_attn.scale(1.0 / cfg.heads as f64);
        attn_out.push(mean_attn);

        let (n3, ln3) = layer_norm(&dq, params.get(&format!("{p}.ln3.g")), params.get(&format!("{p}.ln3.b")));
        let f = ffn(&n3, params, &format!("{p}.ffn"));
        dq.add_assign(&ffn_out(&f, params, &format!("{p}.ffn")));
        check_finite(&dq, &p)?;
        dec_caches.push(DecLayerCache {
            ln1,
            self_attn,
            ln2,
            cross,
            ln3,
            ffn: f,
        });
    }
    let (d_out, dec_ln) = layer_norm(&dq, params.get("dec_ln.g"), params.get("dec_ln.b"));

    // Interval head: (center, width) with logistic squashing, so validity
    // holds for any parameter values.
    let head_y = linear(&d_out, params.get("head.w"), Some(params.get("head.b")));
    check_finite(&head_y, "head")?;
    let mut intervals = Vec::with_capacity(nq);
    let mut centers = Vec::with_capacity(nq);
    let mut widths = Vec::with_capacity(nq);
    let mut start_open = Vec::with_capacity(nq);
    let mut end_open = Vec::with_capacity(nq);
    for i in 0..nq {
        let c = sigmoid(head_y.at(i, 0));
        let w = sigmoid(head_y.at(i, 1));
        let s_raw = c - 0.5 * w;
        let e_raw = c + 0.5 * w;
        start_open.push(s_raw > 0.0 && s_raw < 1.0);
        end_open.push(e_raw > 0.0 && e_raw < 1.0);
        let s = s_raw.clamp(0.0, 1.0);
        let e = e_raw.clamp(0.0, 1.0);
        centers.push(c);
        widths.push(w);
        intervals.push(Interval::new(s, e).expect("head construction yields valid intervals"));
    }

    Ok(ForwardOutput {
        intervals: IntervalSet(intervals),
        v_enc,
        attn: attn_out,
        f_q_proj,
        cache: ForwardCache {
            video_feats: video_feats.clone(),
            query_feats: query_feats.clone(),
            enc_layers: enc_caches,
            enc_ln,
            dec_layers: dec_caches,
            dec_ln,
            centers,
            widths,
            start_open,
            end_open,
            query_indices: qidx,
        },
    })
}

/// Clip indices whose centers fall inside the interval; empty membership
/// falls back to the single clip nearest the interval midpoint (ties to the
/// lower index).
pub fn member_clips(interval: Interval, t: usize) -> Vec<usize> {
    let members: Vec<usize> = (0..t)
        .filter(|&j| {
            let c = (j as f64 + 0.5) / t as f64;
            c >= interval.start && c <= interval.end
        })
        .collect();
    if !members.is_empty() {
        return members;
    }
    let mid = interval.midpoint();
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for j in 0..t {
        let d = ((j as f64 + 0.5) / t as f64 - mid).abs();
        if d < best_d - 1e-15 {
            best_d = d;
            best = j;
        }
    }
    vec![best]
}

/// Mean of encoded clip rows whose centers fall inside each interval.
pub fn moment_pool(v_enc: &Tensor, intervals: &IntervalSet, t: usize) -> Tensor {
    let d = v_enc.cols();
    let mut out = Tensor::zeros(&[intervals.len(), d]);
    for (i, iv) in intervals.iter().enumerate() {
        let members = member_clips(*iv, t);
        let scale = 1.0 / members.len() as f64;
        for &j in &members {
            let row = v_enc.row(j);
            let orow = out.row_mut(i);
            for (o, x) in orow.iter_mut().zip(row) {
                *o += scale * x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[r, c]);
        for v in &mut t.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 16,
            enc_layers: 1,
            dec_layers: 3,
            heads: 2,
            ffn_dim: 24,
            d_v: 6,
            d_q: 6,
            max_queries: 4,
            ..Default::default()
        }
    }

    #[test]
    fn forward_shapes_and_validity() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 1).unwrap();
        let video = rand_mat(8, 6, 2);
        let query = rand_mat(1, 6, 3);
        let out = forward(&p, &cfg, &video, &query).unwrap();
        assert_eq!(out.intervals.len(), 1);
        assert_eq!(out.attn.len(), 3);
        assert_eq!(out.attn[0].shape, vec![1, 8]);
        for a in &out.attn {
            for i in 0..a.rows() {
                let s: f64 = a.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        for iv in out.intervals.iter() {
            assert!(0.0 <= iv.start && iv.start <= iv.end && iv.end <= 1.0);
        }
    }

    #[test]
    fn intervals_valid_for_extreme_params() {
        let cfg = tiny_cfg();
        let mut p = init_params(&cfg, 1).unwrap();
        for t in p.map.values_mut() {
            for v in &mut t.data {
                *v *= 37.0;
            }
        }
        // Softmax/LN keep activations finite; the head clamps keep intervals valid.
        let out = forward(&p, &cfg, &rand_mat(8, 6, 5), &rand_mat(2, 6, 6)).unwrap();
        for iv in out.intervals.iter() {
            assert!(0.0 <= iv.start && iv.start <= iv.end && iv.end <= 1.0);
        }
    }

    #[test]
    fn query_permutation_with_zeroed_index_embeddings() {
        let cfg = tiny_cfg();
        let mut p = init_params(&cfg, 9).unwrap();
        p.map.insert(
            "query_pos".into(),
            Tensor::zeros(&[cfg.max_queries, cfg.d]),
        );
        let video = rand_mat(8, 6, 2);
        let query = rand_mat(3, 6, 3);
        let mut permuted = query.clone();
        let tmp: Vec<f64> = permuted.row(0).to_vec();
        let r2: Vec<f64> = permuted.row(2).to_vec();
        permuted.row_mut(0).copy_from_slice(&r2);
        permuted.row_mut(2).copy_from_slice(&tmp);

        let a = forward(&p, &cfg, &video, &query).unwrap();
        let b = forward(&p, &cfg, &video, &permuted).unwrap();
        assert!((a.intervals.0[0].start - b.intervals.0[2].start).abs() < 1e-9);
        assert!((a.intervals.0[0].end - b.intervals.0[2].end).abs() < 1e-9);
        assert!((a.intervals.0[2].start - b.intervals.0[0].start).abs() < 1e-9);
        assert!((a.intervals.0[1].start - b.intervals.0[1].start).abs() < 1e-9);
    }

    #[test]
    fn identity_indices_match_plain_forward() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 11).unwrap();
        let video = rand_mat(8, 6, 2);
        let query = rand_mat(3, 6, 3);
        let a = forward(&p, &cfg, &video, &query).unwrap();
        let b = forward_with_indices(&p, &cfg, &video, &query, Some(&[0, 1, 2])).unwrap();
        assert_eq!(a.intervals, b.intervals);
    }

    #[test]
    fn removal_view_keeps_sentence_index_embeddings() {
        // A two-row view carrying original indices [0, 2] must use the same
        // embeddings as rows 0 and 2 of the full view, not rows 0 and 1.
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 12).unwrap();
        let video = rand_mat(8, 6, 2);
        let query = rand_mat(3, 6, 3);
        let mut sub = Tensor::zeros(&[2, 6]);
        sub.row_mut(0).copy_from_slice(query.row(0));
        sub.row_mut(1).copy_from_slice(query.row(2));
        let with = forward_with_indices(&p, &cfg, &video, &sub, Some(&[0, 2])).unwrap();
        let without = forward(&p, &cfg, &video, &sub).unwrap();
        assert_eq!(with.cache.query_indices, vec![0, 2]);
        assert_ne!(with.intervals, without.intervals);
    }

    #[test]
    fn invalid_query_indices_are_rejected() {
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 13).unwrap();
        let video = rand_mat(8, 6, 2);
        let query = rand_mat(2, 6, 3);
        for bad in [&[1usize, 0][..], &[0, 0], &[0, cfg.max_queries]] {
            assert!(forward_with_indices(&p, &cfg, &video, &query, Some(bad)).is_err());
        }
        assert!(forward_with_indices(&p, &cfg, &video, &query, Some(&[0])).is_err());
    }

    #[test]
    fn cross_attention_cosine_scale_invariance() {
        // Scaling the key/value source by a positive scalar leaves the
        // cosine logits, and hence the attention matrix, unchanged.
        let cfg = tiny_cfg();
        let p = init_params(&cfg, 4).unwrap();
        let q_src = rand_mat(2, 16, 7);
        let kv = rand_mat(8, 16, 8);
        let mut kv3 = kv.clone();
        kv3.scale(3.0);
        let a = cosine_cross_attention(&q_src, &kv, &p, "dec0.cross", cfg.heads).unwrap();
        let b = cosine_cross_attention(&q_src, &kv3, &p, "dec0.cross", cfg.heads).unwrap();
        for (x, y) in a.attn.iter().zip(&b.attn) {
            for (u, v) in x.data.iter().zip(&y.data) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn moment_pool_examples() {
        let v = Tensor::from_rows(vec![
            vec![1.0, 1.0],
            vec![3.0, 3.0],
            vec![5.0, 5.0],
            vec![7.0, 7.0],
        ]);
        let set = IntervalSet(vec![Interval::new(0.25, 0.75).unwrap()]);
        let out = moment_pool(&v, &set, 4);
        assert_eq!(out.row(0), &[4.0, 4.0]);

        let all = IntervalSet(vec![Interval::new(0.0, 1.0).unwrap()]);
        assert_eq!(moment_pool(&v, &all, 4).row(0), &[4.0, 4.0]);

        // Zero-width interval at 0.5: nearest clip centers are 0.375 and
        // 0.625, tie goes to the lower index.
        let point = IntervalSet(vec![Interval::new(0.5, 0.5).unwrap()]);
        assert_eq!(moment_pool(&v, &point, 4).row(0), &[3.0, 3.0]);
    }

    #[test]
    fn moment_pool_is_convex_combination() {
        let v = rand_mat(8, 4, 11);
        let set = IntervalSet(vec![Interval::new(0.3, 0.9).unwrap()]);
        let out = moment_pool(&v, &set, 8);
        let members = member_clips(set.0[0], 8);
        for d in 0..4 {
            let lo = members.iter().map(|&j| v.at(j, d)).fold(f64::INFINITY, f64::min);
            let hi = members
                .iter()
                .map(|&j| v.at(j, d))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(out.at(0, d) >= lo - 1e-12 && out.at(0, d) <= hi + 1e-12);
        }
    }
}
