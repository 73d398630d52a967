//! Loss terms and their gradients with respect to model outputs.
//!
//! Values are computed here; `backward` chains the output gradients through
//! the network. Targets (ground truth or teacher intervals) never receive
//! gradients: they enter as plain data, and the clip-membership mask used by
//! moment pooling is discrete.

use super::forward::{member_clips, ForwardOutput};
use crate::error::{CclError, Result};
use crate::interval::{Interval, IntervalSet};
use crate::tensor::{cosine, cosine_backward, logsumexp, Tensor};

const ATT_EPS: f64 = 1e-9;

/// Which scalar loss to assemble from a forward pass. Weights multiply each
/// term into the total; `None` terms contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct LossSpec {
    /// (target intervals, weight): L1 + (1 - GIoU) location loss.
    pub loc: Option<(IntervalSet, f64)>,
    /// (target intervals, weight): attention-guided loss on every decoder layer.
    pub att: Option<(IntervalSet, f64)>,
    /// (teacher intervals for pooling, temperature, weight): contrastive
    /// consistency between pooled moment features and projected queries.
    pub con: Option<(IntervalSet, f64, f64)>,
    /// (teacher intervals, weight): plain L1 prediction consistency, used by
    /// the ablation arm that disables the contrastive loss.
    pub pred_l1: Option<(IntervalSet, f64)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossValues {
    pub total: f64,
    pub loc: f64,
    pub att: f64,
    pub con: f64,
}

/// Gradients with respect to the forward outputs; consumed by `backward`.
#[derive(Debug, Clone)]
pub(crate) struct OutputGrads {
    /// Nq x 2, d/d(start, end).
    pub d_intervals: Tensor,
    /// Per decoder layer, Nq x T, d/d(head-averaged attention).
    pub d_attn: Vec<Tensor>,
    /// T x D.
    pub d_v_enc: Tensor,
    /// Nq x D.
    pub d_f_q_proj: Tensor,
}

impl OutputGrads {
    pub fn zeros(out: &ForwardOutput) -> Self {
        let nq = out.intervals.len();
        let t = out.v_enc.rows();
        let d = out.v_enc.cols();
        OutputGrads {
            d_intervals: Tensor::zeros(&[nq, 2]),
            d_attn: out.attn.iter().map(|_| Tensor::zeros(&[nq, t])).collect(),
            d_v_enc: Tensor::zeros(&[t, d]),
            d_f_q_proj: Tensor::zeros(&[nq, d]),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// giou(pred, target) and its partials with respect to pred start/end.
fn giou_with_grad(p: Interval, t: Interval) -> (f64, f64, f64) {
    let inter = (p.end.min(t.end) - p.start.max(t.start)).max(0.0);
    let union = p.length() + t.length() - inter;
    let enc = p.end.max(t.end) - p.start.min(t.start);

    let has_inter = inter > 0.0;
    let di_ds = if has_inter && p.start > t.start { -1.0 } else { 0.0 };
    let di_de = if has_inter && p.end < t.end { 1.0 } else { 0.0 };
    let du_ds = -1.0 - di_ds;
    let du_de = 1.0 - di_de;
    let denc_ds = if p.start < t.start { -1.0 } else { 0.0 };
    let denc_de = if p.end > t.end { 1.0 } else { 0.0 };

    let (iou, diou_ds, diou_de) = if union > 0.0 {
        (
            inter / union,
            (di_ds * union - inter * du_ds) / (union * union),
            (di_de * union - inter * du_de) / (union * union),
        )
    } else {
        (0.0, 0.0, 0.0)
    };

    if enc > 0.0 {
        let g = iou - (enc - union) / enc;
        // d[(enc - union)/enc] = ((denc - du) * enc - (enc - union) * denc) / enc^2
        let pen_ds = ((denc_ds - du_ds) * enc - (enc - union) * denc_ds) / (enc * enc);
        let pen_de = ((denc_de - du_de) * enc - (enc - union) * denc_de) / (enc * enc);
        (g, diou_ds - pen_ds, diou_de - pen_de)
    } else {
        (iou, diou_ds, diou_de)
    }
}

/// Location loss value plus gradient into `d_intervals`, scaled by `weight`.
fn location_loss_grad(
    pred: &IntervalSet,
    target: &IntervalSet,
    weight: f64,
    d_intervals: &mut Tensor,
) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CclError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    for (i, (p, t)) in pred.iter().zip(target.iter()).enumerate() {
        let (g, dg_ds, dg_de) = giou_with_grad(*p, *t);
        total += (p.start - t.start).abs() + (p.end - t.end).abs() + (1.0 - g);
        *d_intervals.at_mut(i, 0) += weight / n * (sign(p.start - t.start) - dg_ds);
        *d_intervals.at_mut(i, 1) += weight / n * (sign(p.end - t.end) - dg_de);
    }
    Ok(total / n)
}

fn pred_l1_grad(
    pred: &IntervalSet,
    target: &IntervalSet,
    weight: f64,
    d_intervals: &mut Tensor,
) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CclError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    for (i, (p, t)) in pred.iter().zip(target.iter()).enumerate() {
        total += (p.start - t.start).abs() + (p.end - t.end).abs();
        *d_intervals.at_mut(i, 0) += weight / n * sign(p.start - t.start);
        *d_intervals.at_mut(i, 1) += weight / n * sign(p.end - t.end);
    }
    Ok(total / n)
}

/// Uniform-inside-GT target distribution for one sentence.
fn attention_target(iv: Interval, t: usize) -> Vec<(usize, f64)> {
    let members = member_clips(iv, t);
    let w = 1.0 / members.len() as f64;
    members.into_iter().map(|j| (j, w)).collect()
}

/// Cross-entropy between head-averaged decoder attention and the uniform
/// distribution over clips inside each ground-truth interval, averaged over
/// layers and sentences.
pub fn attention_loss(attn: &[Tensor], gt: &IntervalSet, t: usize) -> Result<f64> {
    attention_loss_grad(attn, gt, t, 0.0, None)
}

fn attention_loss_grad(
    attn: &[Tensor],
    gt: &IntervalSet,
    t: usize,
    weight: f64,
    mut d_attn: Option<&mut Vec<Tensor>>,
) -> Result<f64> {
    let layers = attn.len();
    let n = attn.first().map_or(0, |a| a.rows());
    if gt.len() != n {
        return Err(CclError::LengthMismatch {
            left: gt.len(),
            right: n,
        });
    }
    let norm = 1.0 / (layers * n) as f64;
    let mut total = 0.0;
    for (l, a) in attn.iter().enumerate() {
        for (i, iv) in gt.iter().enumerate() {
            for (j, tw) in attention_target(*iv, t) {
                let p = a.at(i, j) + ATT_EPS;
                total -= tw * p.ln();
                if let Some(d) = d_attn.as_deref_mut() {
                    *d[l].at_mut(i, j) -= weight * norm * tw / p;
                }
            }
        }
    }
    Ok(total * norm)
}

/// Symmetric InfoNCE over cosine similarities at temperature `tau`, computed
/// through log-sum-exp so that tau = 0.01 stays finite.
pub fn contrastive_consistency_loss(f_m: &Tensor, f_q: &Tensor, tau: f64) -> Result<f64> {
    contrastive_grad(f_m, f_q, tau, 0.0, None)
}

fn contrastive_grad(
    f_m: &Tensor,
    f_q: &Tensor,
    tau: f64,
    weight: f64,
    grads: Option<(&mut Tensor, &mut Tensor)>,
) -> Result<f64> {
    if f_m.rows() != f_q.rows() {
        return Err(CclError::LengthMismatch {
            left: f_m.rows(),
            right: f_q.rows(),
        });
    }
    let k = f_m.rows();
    let mut cos_mat = Tensor::zeros(&[k, k]);
    for i in 0..k {
        for j in 0..k {
            // Zero-norm moment rows surface as row i; query rows as row j.
            let c = if crate::tensor::norm(f_m.row(i)) == 0.0 {
                return Err(CclError::ZeroNorm(i));
            } else {
                cosine(f_m.row(i), f_q.row(j), j)?
            };
            *cos_mat.at_mut(i, j) = c;
        }
    }
    let mut logits = cos_mat.clone();
    logits.scale(1.0 / tau);

    let kf = k as f64;
    let mut total = 0.0;
    for i in 0..k {
        total += logsumexp(logits.row(i)) - logits.at(i, i);
        let col: Vec<f64> = (0..k).map(|j| logits.at(j, i)).collect();
        total += logsumexp(&col) - logits.at(i, i);
    }
    total /= kf;

    if let Some((d_m, d_q)) = grads {
        // dL/d logits: row-softmax and column-softmax terms minus diagonals.
        let mut d_logits = Tensor::zeros(&[k, k]);
        for i in 0..k {
            let mut row = logits.row(i).to_vec();
            crate::tensor::softmax_inplace(&mut row);
            for j in 0..k {
                *d_logits.at_mut(i, j) += row[j] / kf;
            }
            *d_logits.at_mut(i, i) -= 1.0 / kf;

            let mut col: Vec<f64> = (0..k).map(|j| logits.at(j, i)).collect();
            crate::tensor::softmax_inplace(&mut col);
            for j in 0..k {
                *d_logits.at_mut(j, i) += col[j] / kf;
            }
            *d_logits.at_mut(i, i) -= 1.0 / kf;
        }
        for i in 0..k {
            for j in 0..k {
                let up = weight * d_logits.at(i, j) / tau;
                if up != 0.0 {
                    cosine_backward(f_m.row(i), f_q.row(j), up, d_m.row_mut(i), d_q.row_mut(j));
                }
            }
        }
    }
    Ok(total)
}

/// Evaluate every requested loss term and collect the output-level gradients.
pub(crate) fn assemble_losses(
    out: &ForwardOutput,
    spec: &LossSpec,
) -> Result<(LossValues, OutputGrads)> {
    let mut grads = OutputGrads::zeros(out);
    let mut values = LossValues::default();
    let t = out.v_enc.rows();

    if let Some((target, w)) = &spec.loc {
        values.loc = location_loss_grad(&out.intervals, target, *w, &mut grads.d_intervals)?;
        values.total += w * values.loc;
    }
    if let Some((target, w)) = &spec.att {
        values.att = attention_loss_grad(&out.attn, target, t, *w, Some(&mut grads.d_attn))?;
        values.total += w * values.att;
    }
    if let Some((teacher_intervals, tau, w)) = &spec.con {
        let f_m = super::forward::moment_pool(&out.v_enc, teacher_intervals, t);
        // d(moment mean)/d(v_enc row) distributes uniformly over members.
        let mut d_f_m = Tensor::zeros(&[f_m.rows(), f_m.cols()]);
        values.con =
            contrastive_grad(&f_m, &out.f_q_proj, *tau, *w, Some((&mut d_f_m, &mut grads.d_f_q_proj)))?;
        values.total += w * values.con;
        for (i, iv) in teacher_intervals.iter().enumerate() {
            let members = member_clips(*iv, t);
            let scale = 1.0 / members.len() as f64;
            for &j in &members {
                let dst = grads.d_v_enc.row_mut(j);
                for (dv, dm) in dst.iter_mut().zip(d_f_m.row(i)) {
                    *dv += scale * dm;
                }
            }
        }
    }
    if let Some((target, w)) = &spec.pred_l1 {
        values.con = pred_l1_grad(&out.intervals, target, *w, &mut grads.d_intervals)?;
        values.total += w * values.con;
    }
    Ok((values, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::giou;

    const TOL: f64 = 1e-9;

    fn iv(s: f64, e: f64) -> Interval {
        Interval::new(s, e).unwrap()
    }

    #[test]
    fn attention_loss_examples() {
        let t = 8;
        let gt = IntervalSet(vec![iv(0.0, 0.25)]); // clips 0 and 1
        // attn equals the target distribution on every layer -> entropy log k.
        let mut a = Tensor::zeros(&[1, t]);
        *a.at_mut(0, 0) = 0.5;
        *a.at_mut(0, 1) = 0.5;
        let loss = attention_loss(&[a.clone(), a.clone()], &gt, t).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-6);

        // Concentrated target matched by concentrated attention -> ~0.
        let gt1 = IntervalSet(vec![iv(0.0, 0.12)]); // only clip 0
        let mut b = Tensor::zeros(&[1, t]);
        *b.at_mut(0, 0) = 1.0;
        assert!(attention_loss(&[b], &gt1, t).unwrap() < 1e-6);

        // Uniform attention, target uniform over 2 clips -> log 8 per term.
        let u = Tensor {
            shape: vec![1, t],
            data: vec![1.0 / t as f64; t],
        };
        let loss = attention_loss(&[u], &gt, t).unwrap();
        assert!((loss - (t as f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn contrastive_examples() {
        // K=1: both fractions are 1, loss exactly 0.
        let m = Tensor::from_rows(vec![vec![1.0, 0.0]]);
        let q = Tensor::from_rows(vec![vec![0.5, 0.5]]);
        assert_eq!(contrastive_consistency_loss(&m, &q, 0.01).unwrap(), 0.0);

        // K=2 with identity cosine pattern at tau=1.
        let m = Tensor::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let loss = contrastive_consistency_loss(&m, &m, 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < TOL, "{loss} vs {expected}");

        // Orthonormal identical rows, small tau -> loss -> 0.
        let loss = contrastive_consistency_loss(&m, &m, 0.01).unwrap();
        assert!(loss < 1e-6);

        // Zero-norm row errors.
        let z = Tensor::from_rows(vec![vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            contrastive_consistency_loss(&z, &m, 1.0),
            Err(CclError::ZeroNorm(_))
        ));
    }

    #[test]
    fn contrastive_row_rescaling_invariance() {
        let m = Tensor::from_rows(vec![vec![1.0, 0.3], vec![-0.2, 1.0], vec![0.5, -0.5]]);
        let q = Tensor::from_rows(vec![vec![0.9, 0.1], vec![0.1, 0.8], vec![0.4, -0.6]]);
        let base = contrastive_consistency_loss(&m, &q, 0.1).unwrap();
        let mut m7 = m.clone();
        for v in m7.row_mut(1) {
            *v *= 7.0;
        }
        let scaled = contrastive_consistency_loss(&m7, &q, 0.1).unwrap();
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn contrastive_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.gen_range(1..5);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut t = Tensor::zeros(&[k, 4]);
                for v in &mut t.data {
                    *v = rng.gen_range(-1.0..1.0f64) + 0.01;
                }
                t
            };
            let m = mk(&mut rng);
            let q = mk(&mut rng);
            let l = contrastive_consistency_loss(&m, &q, 0.5).unwrap();
            assert!(l >= -1e-12);
        }
    }

    #[test]
    fn giou_grad_matches_finite_differences() {
        let cases = [
            (iv(0.1, 0.4), iv(0.3, 0.7)),
            (iv(0.05, 0.2), iv(0.8, 0.95)),
            (iv(0.2, 0.9), iv(0.3, 0.5)),
            (iv(0.35, 0.55), iv(0.2, 0.8)),
        ];
        let h = 1e-6;
        for (p, t) in cases {
            let (_, ds, de) = giou_with_grad(p, t);
            let fd_s = (giou(iv(p.start + h, p.end), t) - giou(iv(p.start - h, p.end), t)) / (2.0 * h);
            let fd_e = (giou(iv(p.start, p.end + h), t) - giou(iv(p.start, p.end - h), t)) / (2.0 * h);
            assert!((ds - fd_s).abs() < 1e-5, "ds {ds} vs {fd_s}");
            assert!((de - fd_e).abs() < 1e-5, "de {de} vs {fd_e}");
        }
    }
}
