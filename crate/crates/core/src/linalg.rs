//! Small dense linear-algebra kernels: triangular and LU solves,
//! orthogonal/permutation sampling, determinants.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const DIAG_THRESHOLD: f64 = 1e-12;

/// Solve a * x = b by forward substitution for lower-triangular `a`.
///
/// `b` may be a vector [n] or a matrix [n, k]. Diagonal entries must be at
/// least 1e-12 in magnitude; the strictly upper part must be zero.
pub fn unit_lower_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check_square("unit_lower_solve", a)?;
    for i in 0..n {
        for j in i + 1..n {
            if a.at(&[i, j]) != 0.0 {
                return Err(Error::Contract {
                    op: "unit_lower_solve",
                    details: format!("nonzero above diagonal at ({i}, {j})"),
                });
            }
        }
    }
    let (rows, k) = rhs_dims("unit_lower_solve", b, n)?;
    debug_assert_eq!(rows, n);
    let mut x = b.data().to_vec();
    for i in 0..n {
        let d = a.at(&[i, i]);
        if d.abs() < DIAG_THRESHOLD {
            return Err(Error::SingularDiagonal { row: i, value: d });
        }
        for j in 0..i {
            let c = a.at(&[i, j]);
            if c == 0.0 {
                continue;
            }
            for col in 0..k {
                x[i * k + col] -= c * x[j * k + col];
            }
        }
        for col in 0..k {
            x[i * k + col] /= d;
        }
    }
    Ok(Tensor::from_parts(b.shape().to_vec(), x))
}

/// General square solve a * x = b via LU with partial pivoting.
pub fn lu_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = check_square("lu_solve", a)?;
    let (_, k) = rhs_dims("lu_solve", b, n)?;
    let mut lu = a.data().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[col * n + col].abs();
        for r in col + 1..n {
            let v = lu[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < DIAG_THRESHOLD {
            return Err(Error::SingularDiagonal { row: col, value: lu[pivot * n + col] });
        }
        if pivot != col {
            perm.swap(pivot, col);
            for j in 0..n {
                lu.swap(pivot * n + j, col * n + j);
            }
        }
        let d = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            lu[r * n + col] = f;
            for j in col + 1..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
        }
    }
    let mut x = vec![0.0; n * k];
    for (i, &src) in perm.iter().enumerate() {
        for col in 0..k {
            x[i * k + col] = b.data()[src * k + col];
        }
    }
    for i in 0..n {
        for j in 0..i {
            let c = lu[i * n + j];
            for col in 0..k {
                x[i * k + col] -= c * x[j * k + col];
            }
        }
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            let c = lu[i * n + j];
            for col in 0..k {
                x[i * k + col] -= c * x[j * k + col];
            }
        }
        let d = lu[i * n + i];
        for col in 0..k {
            x[i * k + col] /= d;
        }
    }
    Ok(Tensor::from_parts(b.shape().to_vec(), x))
}

/// Determinant via LU with partial pivoting; 0.0 for numerically singular input.
pub fn det(a: &Tensor) -> Result<f64> {
    let n = check_square("det", a)?;
    let mut lu = a.data().to_vec();
    let mut sign = 1.0f64;
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[col * n + col].abs();
        for r in col + 1..n {
            let v = lu[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return Ok(0.0);
        }
        if pivot != col {
            sign = -sign;
            for j in 0..n {
                lu.swap(pivot * n + j, col * n + j);
            }
        }
        let d = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            for j in col + 1..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
        }
    }
    let mut out = sign;
    for i in 0..n {
        out *= lu[i * n + i];
    }
    Ok(out)
}

/// Sample a Haar-distributed orthogonal r x r matrix (QR of a Gaussian
/// matrix with the R-diagonal sign fix, so the result is deterministic
/// per rng state).
pub fn random_orthogonal(r: usize, rng: &mut Rng) -> Result<Tensor> {
    if r == 0 {
        return Err(Error::InvalidShape {
            op: "random_orthogonal",
            shape: vec![0, 0],
            details: "dimension must be >= 1".into(),
        });
    }
    let g = Tensor::from_parts(vec![r, r], rng.gauss_vec(r * r));
    let (q, rdiag) = householder_qr(&g);
    // fix signs so Q is Haar distributed and uniquely determined
    let mut q = q;
    for j in 0..r {
        if rdiag[j] < 0.0 {
            for i in 0..r {
                let v = q.at(&[i, j]);
                q.set(&[i, j], -v);
            }
        }
    }
    Ok(q)
}

/// Householder QR returning (Q, diag(R)).
fn householder_qr(a: &Tensor) -> (Tensor, Vec<f64>) {
    let n = a.shape()[0];
    let mut r = a.data().to_vec();
    let mut q = Tensor::eye(n).data().to_vec();
    for col in 0..n {
        let mut norm = 0.0;
        for i in col..n {
            norm += r[i * n + col] * r[i * n + col];
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[col * n + col] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        v[col] = r[col * n + col] - alpha;
        for i in col + 1..n {
            v[i] = r[i * n + col];
        }
        let vtv: f64 = v.iter().map(|x| x * x).sum();
        if vtv == 0.0 {
            continue;
        }
        // apply H = I - 2 v v^T / (v^T v) on the left of R and right of Q^T
        for j in col..n {
            let mut dot = 0.0;
            for i in col..n {
                dot += v[i] * r[i * n + j];
            }
            let f = 2.0 * dot / vtv;
            for i in col..n {
                r[i * n + j] -= f * v[i];
            }
        }
        for row in 0..n {
            let mut dot = 0.0;
            for i in col..n {
                dot += q[row * n + i] * v[i];
            }
            let f = 2.0 * dot / vtv;
            for i in col..n {
                q[row * n + i] -= f * v[i];
            }
        }
    }
    let rdiag = (0..n).map(|i| r[i * n + i]).collect();
    (Tensor::from_parts(vec![n, n], q), rdiag)
}

/// A permutation of [0, n), with matrix and map forms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { map: (0..n).collect() }
    }

    /// Uniform Fisher-Yates sample.
    pub fn random(n: usize, rng: &mut Rng) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut map);
        Permutation { map }
    }

    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n || std::mem::replace(&mut seen[v], true) {
                return Err(Error::Contract {
                    op: "Permutation::from_map",
                    details: format!("{map:?} is not a permutation"),
                });
            }
        }
        Ok(Permutation { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// The image of index i.
    pub fn apply(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    /// Matrix P with P[i, map(i)] = 1, so (P x)_i = x_{map(i)}.
    pub fn matrix(&self) -> Tensor {
        let n = self.map.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &j) in self.map.iter().enumerate() {
            t.set(&[i, j], 1.0);
        }
        t
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { map: inv }
    }

    /// self after other: (self * other)(i) = other(self(i)).
    pub fn compose(&self, other: &Permutation) -> Permutation {
        Permutation { map: self.map.iter().map(|&i| other.map[i]).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Permute the rows (axis 0) of a tensor: out[i, ...] = t[map(i), ...].
    pub fn permute_rows(&self, t: &Tensor) -> Result<Tensor> {
        let n = self.map.len();
        if t.shape().first() != Some(&n) {
            return Err(Error::ShapeMismatch {
                op: "permute_rows",
                left: vec![n],
                right: t.shape().to_vec(),
            });
        }
        let row = t.numel() / n;
        let mut data = vec![0.0; t.numel()];
        for (i, &src) in self.map.iter().enumerate() {
            data[i * row..(i + 1) * row].copy_from_slice(&t.data()[src * row..(src + 1) * row]);
        }
        Ok(Tensor::from_parts(t.shape().to_vec(), data))
    }
}

/// Right-multiply the last axis of `t` by `o` ([r, r]): out[..., :] = t[..., :] * o.
pub fn apply_last_axis(t: &Tensor, o: &Tensor) -> Result<Tensor> {
    let r = *t.shape().last().ok_or(Error::InvalidShape {
        op: "apply_last_axis",
        shape: t.shape().to_vec(),
        details: "rank 0".into(),
    })?;
    if o.shape() != [r, r] {
        return Err(Error::ShapeMismatch {
            op: "apply_last_axis",
            left: t.shape().to_vec(),
            right: o.shape().to_vec(),
        });
    }
    let flat = t.reshape(&[t.numel() / r, r])?;
    flat.matmul(o)?.reshape(t.shape())
}

fn check_square(op: &'static str, a: &Tensor) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::InvalidShape {
            op,
            shape: a.shape().to_vec(),
            details: "expected a square matrix".into(),
        });
    }
    Ok(a.shape()[0])
}

fn rhs_dims(op: &'static str, b: &Tensor, n: usize) -> Result<(usize, usize)> {
    match b.rank() {
        1 if b.shape()[0] == n => Ok((n, 1)),
        2 if b.shape()[0] == n => Ok((n, b.shape()[1])),
        _ => Err(Error::ShapeMismatch { op, left: vec![n, n], right: b.shape().to_vec() }),
    }
}
