//! Minimal dense f64 tensors (scalar, vector, matrix) for the hand-rolled
//! model. Row-major storage; shapes checked at the call sites that care.

use crate::error::{CclError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (r x k) * other (k x c) -> (r x c)`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (r, k) = (self.rows(), self.cols());
        let (k2, c) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dim");
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            for p in 0..k {
                let a = self.at(i, p);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(p);
                let out_row = out.row_mut(i);
                for j in 0..c {
                    out_row[j] += a * orow[j];
                }
            }
        }
        out
    }

    /// `self (r x k) * other^T (c x k) -> (r x c)`
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        let (r, k) = (self.rows(), self.cols());
        let (c, k2) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul_t inner dim");
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let arow = self.row(i);
            for j in 0..c {
                out.data[i * c + j] = dot(arow, other.row(j));
            }
        }
        out
    }

    /// `self^T (k x r) * other (k x c) -> (r x c)`
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        let (k, r) = (self.rows(), self.cols());
        let (k2, c) = (other.rows(), other.cols());
        assert_eq!(k, k2, "t_matmul inner dim");
        let mut out = Tensor::zeros(&[r, c]);
        for p in 0..k {
            let arow = self.row(p);
            let brow = other.row(p);
            for i in 0..r {
                let a = arow[i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * c..(i + 1) * c];
                for j in 0..c {
                    out_row[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn check_shape(&self, name: &str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(CclError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// cos(a, b); errors on zero-norm inputs (row index is the caller's label).
pub fn cosine(a: &[f64], b: &[f64], row: usize) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(CclError::ZeroNorm(row));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Gradients of cos(a, b) with respect to a and b, accumulated into outputs.
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64, da: &mut [f64], db: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    for i in 0..a.len() {
        da[i] += upstream * (b[i] / (na * nb) - c * a[i] / (na * na));
        db[i] += upstream * (a[i] / (na * nb) - c * b[i] / (nb * nb));
    }
}

/// Numerically stable softmax over a slice, written in place.
pub fn softmax_inplace(x: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Backward through softmax: given y = softmax(x) and dL/dy, accumulate dL/dx.
pub fn softmax_backward(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let s = dot(y, dy);
    for i in 0..y.len() {
        dx[i] += y[i] * (dy[i] - s);
    }
}

/// log(sum_j exp(x_j)) with max shift.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
