//! Dense row-major f64 tensors with shape metadata.
//!
//! Tensors are immutable values: every operation returns a fresh tensor.
//! Broadcasting follows the usual right-aligned rule (trailing dims must
//! match or be 1).

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Checked constructor: data length must match the shape product and all
    /// entries must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::DataLength { expected: numel(&shape), got: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for op results; shape/length must already agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = numel(shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let i = self.flat_index(idx);
        self.data[i] = v;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().enumerate() {
            debug_assert!(d < self.shape[i]);
            flat = flat * self.shape[i] + d;
        }
        flat
    }

    /// Metadata-only reshape; the element count must be unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Maximum absolute elementwise difference; shapes must match exactly.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs())))
    }

    // ── broadcasting elementwise ops ─────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("mul", other, |a, b| a * b)
    }

    fn zip_broadcast(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let out_shape = broadcast_shape(op, &self.shape, &other.shape)?;
        let n = numel(&out_shape);
        let ls = broadcast_strides(&self.shape, &out_shape);
        let rs = broadcast_strides(&other.shape, &out_shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        let (mut li, mut ri) = (0usize, 0usize);
        for _ in 0..n {
            data.push(f(self.data[li], other.data[ri]));
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                li += ls[ax];
                ri += rs[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                li -= ls[ax] * out_shape[ax];
                ri -= rs[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    // ── axis manipulation ────────────────────────────────────────────

    /// General axis permutation (data movement).
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        if axes.len() != r || {
            let mut seen = vec![false; r];
            axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        } {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: self.shape.clone(),
                details: format!("axes {axes:?} are not a permutation of 0..{r}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = row_major_strides(&self.shape);
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.data.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut src = 0usize;
        for _ in 0..n {
            data.push(self.data[src]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                src += perm_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= perm_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                details: "expected rank 2".into(),
            });
        }
        self.permute(&[1, 0])
    }

    /// Sum over one axis, optionally keeping it as a length-1 dim.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                shape: self.shape.clone(),
                details: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..mid {
                let base = (o * mid + k) * inner;
                let dst = o * inner;
                for j in 0..inner {
                    data[dst + j] += self.data[base + j];
                }
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor { shape, data })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let c = 1.0 / self.shape[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(c))
    }

    // ── matrix products ─────────────────────────────────────────────

    /// Rank-2 matrix product a[m,k] * b[k,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        mm_accum(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// a[m,k] * b[n,k]^T -> [m,n]; avoids materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = vec![0.0; m * n];
        mm_nt_accum(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// a[k,m]^T * b[k,n] -> [m,n].
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[0] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (k, m, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        mm_tn_accum(&self.data, &other.data, &mut out, k, m, n);
        Ok(Tensor { shape: vec![m, n], data: out })
    }

    /// Batched matmul over identical leading dims:
    /// a[..., m, k] * b[..., k, n] -> [..., m, n].
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (batch, m, k, n) = bmm_dims("bmm", &self.shape, &other.shape, false)?;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_accum(
                &self.data[bi * m * k..(bi + 1) * m * k],
                &other.data[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = self.shape[..self.rank() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor { shape, data: out })
    }

    /// Batched a[..., m, k] * b[..., n, k]^T -> [..., m, n].
    pub fn bmm_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (batch, m, k, n) = bmm_dims("bmm_nt", &self.shape, &other.shape, true)?;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_nt_accum(
                &self.data[bi * m * k..(bi + 1) * m * k],
                &other.data[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = self.shape[..self.rank() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(Tensor { shape, data: out })
    }

    // ── masked softmax ──────────────────────────────────────────────

    /// Softmax over the last axis with a {0,1} mask broadcastable to `self`.
    ///
    /// Masked entries are exactly 0; unmasked entries are positive and sum to
    /// 1 per row (max-subtracted for stability). A fully masked row is an
    /// error unless `allow_empty_rows` is set, in which case it becomes a
    /// zero row.
    pub fn masked_softmax_last(&self, mask: &Tensor, allow_empty_rows: bool) -> Result<Tensor> {
        let row = *self.shape.last().ok_or(Error::InvalidShape {
            op: "masked_softmax",
            shape: self.shape.clone(),
            details: "rank 0".into(),
        })?;
        let out_shape = broadcast_shape("masked_softmax", &self.shape, mask.shape())?;
        if out_shape != self.shape {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: self.shape.clone(),
                right: mask.shape().to_vec(),
            });
        }
        let ms = broadcast_strides(mask.shape(), &out_shape);
        let mask_row_stride = *ms.last().unwrap();
        let rows = self.data.len() / row;
        let mut data = vec![0.0; self.data.len()];
        let mut idx = vec![0usize; out_shape.len()];
        let mut moff = 0usize;
        for r in 0..rows {
            let base = r * row;
            let mut max = f64::NEG_INFINITY;
            for j in 0..row {
                if mask.data[moff + j * mask_row_stride] != 0.0 {
                    max = max.max(self.data[base + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                if !allow_empty_rows {
                    return Err(Error::DegenerateSoftmaxRow { row: r });
                }
            } else {
                let mut sum = 0.0;
                for j in 0..row {
                    if mask.data[moff + j * mask_row_stride] != 0.0 {
                        let e = (self.data[base + j] - max).exp();
                        data[base + j] = e;
                        sum += e;
                    }
                }
                for j in 0..row {
                    data[base + j] /= sum;
                }
            }
            // advance the broadcast mask offset by one row
            if !out_shape.is_empty() {
                let last = out_shape.len() - 1;
                for ax in (0..last).rev() {
                    idx[ax] += 1;
                    moff += ms[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    moff -= ms[ax] * out_shape[ax];
                    idx[ax] = 0;
                }
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data })
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0usize; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() });
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed as `out_shape`, with 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        strides[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 { 0 } else { own[i] };
    }
    strides
}

fn bmm_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    nt: bool,
) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() };
    if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (b0, b1) = (b[b.len() - 2], b[b.len() - 1]);
    let (kb, n) = if nt { (b1, b0) } else { (b0, b1) };
    if ka != kb {
        return Err(err());
    }
    Ok((a[..a.len() - 2].iter().product(), m, ka, n))
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn mm_nt_accum(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn mm_tn_accum(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
