//! Reverse-mode differentiation on a recorded operation tape.
//!
//! Ops execute eagerly and append a node holding the forward value; the
//! recording order is already a topological order, so `backward` walks the
//! nodes once in reverse. The tape is single-writer and not shared across
//! threads.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    /// x[..., in] * w[out, in]^T -> [..., out]
    Linear(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    BmmNt(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAxis(Var, usize, bool),
    SumAll(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    RsqrtEps(Var),
    /// softmax over the last axis under a constant {0,1} mask
    MaskedSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    CeLoss { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Neg(..) => "neg",
        Op::Scale(..) => "scale",
        Op::Linear(..) => "linear",
        Op::Matmul(..) => "matmul",
        Op::Bmm(..) => "bmm",
        Op::BmmNt(..) => "bmm_nt",
        Op::Reshape(..) => "reshape",
        Op::Permute(..) => "permute",
        Op::SumAxis(..) => "sum_axis",
        Op::SumAll(..) => "sum_all",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Relu(..) => "relu",
        Op::Gelu(..) => "gelu",
        Op::Tanh(..) => "tanh",
        Op::RsqrtEps(..) => "rsqrt_eps",
        Op::MaskedSoftmax(..) => "masked_softmax",
        Op::GatherRows(..) => "gather_rows",
        Op::CeLoss { .. } => "ce_loss",
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; `backward` reports a gradient for it (zero if unused).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: true }, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { trainable: false }, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    // ── recorded operations ─────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).neg();
        self.unary(a, v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.unary(a, v, Op::Scale(a, c))
    }

    /// x[..., in] * w[out, in]^T; leading dims of x are flattened for the product.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 || xv.rank() < 1 || *xv.shape().last().unwrap() != wv.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let in_dim = wv.shape()[1];
        let out_dim = wv.shape()[0];
        let rows = xv.numel() / in_dim;
        let flat = xv.reshape(&[rows, in_dim])?;
        let y = flat.matmul_nt(wv)?;
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let y = y.reshape(&shape)?;
        Ok(self.binary(x, w, y, Op::Linear(x, w)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Matmul(a, b)))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).bmm(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Bmm(a, b)))
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).bmm_nt(self.value(b))?;
        Ok(self.binary(a, b, v, Op::BmmNt(a, b)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        Ok(self.unary(a, v, Op::Permute(a, axes.to_vec())))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let v = self.value(a).sum_axis(axis, keepdim)?;
        Ok(self.unary(a, v, Op::SumAxis(a, axis, keepdim)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let c = 1.0 / self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis, keepdim)?;
        Ok(self.scale(s, c))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let c = 1.0 / self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(a, v, Op::Ln(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    /// Elementwise (x + eps)^(-1/2).
    pub fn rsqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| 1.0 / (x + eps).sqrt());
        self.unary(a, v, Op::RsqrtEps(a))
    }

    /// Masked softmax over the last axis; the mask is a constant.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor, allow_empty: bool) -> Result<Var> {
        let v = self.value(a).masked_softmax_last(mask, allow_empty)?;
        Ok(self.unary(a, v, Op::MaskedSoftmax(a)))
    }

    /// out[i, ...] = table[ids[i], ...]
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let n = tv.shape().first().copied().unwrap_or(0);
        if tv.rank() < 1 || ids.iter().any(|&i| i >= n) {
            return Err(Error::Contract {
                op: "gather_rows",
                details: format!("index out of range for table with {n} rows"),
            });
        }
        let row = tv.numel() / n;
        let mut data = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            data.extend_from_slice(&tv.data()[i * row..(i + 1) * row]);
        }
        let mut shape = tv.shape().to_vec();
        shape[0] = ids.len();
        let v = Tensor::from_parts(shape, data);
        Ok(self.unary(table, v, Op::GatherRows(table, ids.to_vec())))
    }

    /// Weighted mean cross-entropy over rows of logits [n, v]:
    /// sum_i w_i * (-log softmax(logits_i)[targets_i]) / sum_i w_i.
    pub fn ce_loss(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::Contract {
                op: "ce_loss",
                details: format!(
                    "logits {:?} vs {} targets / {} weights",
                    lv.shape(),
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let v = lv.shape()[1];
        if targets.iter().any(|&t| t >= v) {
            return Err(Error::Contract { op: "ce_loss", details: "target id out of vocab".into() });
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Contract { op: "ce_loss", details: "weights sum to zero".into() });
        }
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &lv.data()[i * v..(i + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += w * (lse - row[t]);
        }
        let value = Tensor::scalar(total / wsum);
        Ok(self.unary(
            logits,
            value,
            Op::CeLoss { logits, targets: targets.to_vec(), weights: weights.to_vec() },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// trainable leaf. Unused leaves get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract {
                op: "backward",
                details: format!("output must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                grads[id] = Some(g);
            }
        }
        // zero gradients for unused trainable leaves
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        contribution: Tensor,
        op: &'static str,
    ) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        if !contribution.is_finite() {
            return Err(Error::Numeric { op, details: "non-finite gradient".into() });
        }
        grads[v.0] = Some(match grads[v.0].take() {
            Some(existing) => existing.add(&contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn backprop_node(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let name = op_name(&node.op);
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, reduce_to_shape(g, self.shape(*a))?, name)?;
                self.accum(grads, *b, reduce_to_shape(g, self.shape(*b))?, name)?;
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, reduce_to_shape(g, self.shape(*a))?, name)?;
                self.accum(grads, *b, reduce_to_shape(&g.neg(), self.shape(*b))?, name)?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.mul(self.value(*b))?;
                    self.accum(grads, *a, reduce_to_shape(&ga, self.shape(*a))?, name)?;
                }
                if self.needs(*b) {
                    let gb = g.mul(self.value(*a))?;
                    self.accum(grads, *b, reduce_to_shape(&gb, self.shape(*b))?, name)?;
                }
            }
            Op::Neg(a) => self.accum(grads, *a, g.neg(), name)?,
            Op::Scale(a, c) => self.accum(grads, *a, g.scale(*c), name)?,
            Op::Linear(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let in_dim = wv.shape()[1];
                let out_dim = wv.shape()[0];
                let rows = xv.numel() / in_dim;
                let gf = g.reshape(&[rows, out_dim])?;
                if self.needs(*x) {
                    let dx = gf.matmul(wv)?.reshape(xv.shape())?;
                    self.accum(grads, *x, dx, name)?;
                }
                if self.needs(*w) {
                    let xf = xv.reshape(&[rows, in_dim])?;
                    let dw = gf.matmul_tn(&xf)?;
                    self.accum(grads, *w, dw, name)?;
                }
            }
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, g.matmul_nt(self.value(*b))?, name)?;
                }
                if self.needs(*b) {
                    self.accum(grads, *b, self.value(*a).matmul_tn(g)?, name)?;
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accum(grads, *a, batched(g, bv, |gi, bi| gi.matmul_nt(bi))?, name)?;
                }
                if self.needs(*b) {
                    self.accum(grads, *b, batched(av, g, |ai, gi| ai.matmul_tn(gi))?, name)?;
                }
            }
            Op::BmmNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // y = a b^T: da = g b, db = g^T a
                if self.needs(*a) {
                    self.accum(grads, *a, batched(g, bv, |gi, bi| gi.matmul(bi))?, name)?;
                }
                if self.needs(*b) {
                    self.accum(grads, *b, batched(g, av, |gi, ai| gi.matmul_tn(ai))?, name)?;
                }
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, g.reshape(self.shape(*a))?, name)?;
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                self.accum(grads, *a, g.permute(&inv)?, name)?;
            }
            Op::SumAxis(a, axis, keepdim) => {
                let gk = if *keepdim {
                    g.clone()
                } else {
                    let mut shape = g.shape().to_vec();
                    shape.insert(*axis, 1);
                    g.reshape(&shape)?
                };
                let expanded = Tensor::zeros(self.shape(*a)).add(&gk)?;
                self.accum(grads, *a, expanded, name)?;
            }
            Op::SumAll(a) => {
                self.accum(grads, *a, Tensor::filled(self.shape(*a), g.data()[0]), name)?;
            }
            Op::Exp(a) => {
                self.accum(grads, *a, g.mul(&node.value)?, name)?;
            }
            Op::Ln(a) => {
                let inv = self.value(*a).map(|x| 1.0 / x);
                self.accum(grads, *a, g.mul(&inv)?, name)?;
            }
            Op::Relu(a) => {
                let m = self.value(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g.mul(&m)?, name)?;
            }
            Op::Gelu(a) => {
                let d = self.value(*a).map(gelu_bwd);
                self.accum(grads, *a, g.mul(&d)?, name)?;
            }
            Op::Tanh(a) => {
                let d = node.value.map(|y| 1.0 - y * y);
                self.accum(grads, *a, g.mul(&d)?, name)?;
            }
            Op::RsqrtEps(a) => {
                let d = node.value.map(|y| -0.5 * y * y * y);
                self.accum(grads, *a, g.mul(&d)?, name)?;
            }
            Op::MaskedSoftmax(a) => {
                // masked outputs are exactly 0, so they contribute nothing
                let y = &node.value;
                let gy = g.mul(y)?;
                let rowsum = gy.sum_axis(y.rank() - 1, true)?;
                let dx = y.mul(&g.sub(&rowsum)?)?;
                self.accum(grads, *a, dx, name)?;
            }
            Op::GatherRows(table, ids) => {
                let tv = self.value(*table);
                let n = tv.shape()[0];
                let row = tv.numel() / n;
                let mut dt = vec![0.0; tv.numel()];
                for (i, &src) in ids.iter().enumerate() {
                    for j in 0..row {
                        dt[src * row + j] += g.data()[i * row + j];
                    }
                }
                self.accum(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt), name)?;
            }
            Op::CeLoss { logits, targets, weights } => {
                let lv = self.value(*logits);
                let v = lv.shape()[1];
                let wsum: f64 = weights.iter().sum();
                let go = g.data()[0] / wsum;
                let mut dl = vec![0.0; lv.numel()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &lv.data()[i * v..(i + 1) * v];
                    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - max).exp() / sum;
                        dl[i * v + j] = go * w * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accum(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), dl), name)?;
            }
        }
        Ok(())
    }
}

/// Sum `g` down to `shape` by collapsing broadcast axes.
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let mut t = g.clone();
    while t.rank() > shape.len() {
        t = t.sum_axis(0, false)?;
    }
    for ax in 0..shape.len() {
        if t.shape()[ax] != shape[ax] {
            debug_assert_eq!(shape[ax], 1);
            t = t.sum_axis(ax, true)?;
        }
    }
    t.reshape(shape)
}

fn batched(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let ar = a.rank();
    let br = b.rank();
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let (am, ak) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (bm, bk) = (b.shape()[br - 2], b.shape()[br - 1]);
    let mut out: Option<(Vec<usize>, Vec<f64>)> = None;
    for bi in 0..batch {
        let asl = Tensor::from_parts(
            vec![am, ak],
            a.data()[bi * am * ak..(bi + 1) * am * ak].to_vec(),
        );
        let bsl = Tensor::from_parts(
            vec![bm, bk],
            b.data()[bi * bm * bk..(bi + 1) * bm * bk].to_vec(),
        );
        let r = f(&asl, &bsl)?;
        match &mut out {
            None => {
                let mut shape = a.shape()[..ar - 2].to_vec();
                shape.extend_from_slice(r.shape());
                let mut data = Vec::with_capacity(batch * r.numel());
                data.extend_from_slice(r.data());
                out = Some((shape, data));
            }
            Some((_, data)) => data.extend_from_slice(r.data()),
        }
    }
    let (shape, data) = out.expect("batched: empty batch");
    Ok(Tensor::from_parts(shape, data))
}

// ── finite-difference gradient checking ─────────────────────────────

/// One offending coordinate from a finite-difference check.
#[derive(Clone, Debug)]
pub struct FiniteDiffEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst: Option<FiniteDiffEntry>,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Compare reverse-mode gradients against central finite differences for
/// every coordinate of every named parameter.
///
/// `build` must deterministically rebuild the scalar loss on a fresh tape
/// from leaves created in the order of `params`. The relative error per
/// coordinate is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
pub fn finite_diff_check<F>(
    params: &[(String, Tensor)],
    h: f64,
    tol: f64,
    build: F,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var> + Sync,
{
    use rayon::prelude::*;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Contract {
                op: "finite_diff_check",
                details: "loss must be scalar".into(),
            });
        }
        Ok(tape.value(loss).data()[0])
    };

    // analytic gradients once
    let base_values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tape = GradTape::new();
    let vars: Vec<Var> = base_values.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> =
        vars.iter().map(|&v| grads.get(v).expect("leaf gradient").clone()).collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.numel()).map(move |i| (pi, i)))
        .collect();

    let entries: Vec<Result<FiniteDiffEntry>> = coords
        .par_iter()
        .map(|&(pi, i)| {
            let mut values = base_values.clone();
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + h;
            let plus = eval(&values)?;
            values[pi].data_mut()[i] = orig - h;
            let minus = eval(&values)?;
            let numeric = (plus - minus) / (2.0 * h);
            let ga = analytic[pi].data()[i];
            let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-8);
            Ok(FiniteDiffEntry {
                name: params[pi].0.clone(),
                index: i,
                analytic: ga,
                numeric,
                rel_err: rel,
            })
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    for e in entries {
        let e = e?;
        checked += 1;
        if e.rel_err >= max_rel {
            max_rel = e.rel_err;
            worst = Some(e);
        }
    }
    Ok(FiniteDiffReport { max_rel_err: max_rel, worst, checked, tol, pass: max_rel <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn quadratic_gradient_is_2x() {
        let mut tape = GradTape::new();
        let xt = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = tape.leaf(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for i in 0..4 {
            assert!((g.data()[i] - 2.0 * xt.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::filled(&[3], 2.0));
        let c = tape.constant(Tensor::scalar(7.0));
        let loss = tape.scale(c, 1.0);
        let _ = x;
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn quadratic_form_finite_diff_tight() {
        // loss = x^T A x with constant A; errors should be ~1e-9 or better
        let mut rng = Rng::new(12, 0);
        let a = Tensor::from_parts(vec![5, 5], rng.gauss_vec(25));
        let x0 = Tensor::from_parts(vec![5], rng.gauss_vec(5));
        let report = finite_diff_check(
            &[("x".to_string(), x0)],
            1e-5,
            1e-9,
            |tape, vars| {
                let a = tape.constant(a.clone());
                let x = tape.reshape(vars[0], &[5, 1])?;
                let ax = tape.matmul(a, x)?;
                let xt = tape.reshape(vars[0], &[1, 5])?;
                let q = tape.matmul(xt, ax)?;
                Ok(tape.sum_all(q))
            },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_finite_diff() {
        let mut rng = Rng::new(3, 1);
        let logits = Tensor::from_parts(vec![4, 6], rng.gauss_vec(24));
        let targets = vec![1usize, 0, 5, 3];
        let weights = vec![1.0, 0.0, 1.0, 1.0];
        let report = finite_diff_check(
            &[("logits".to_string(), logits)],
            1e-5,
            1e-6,
            |tape, vars| tape.ce_loss(vars[0], &targets, &weights),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_ops_finite_diff() {
        // exercise linear, bmm_nt, masked softmax, gelu, reductions together
        let mut rng = Rng::new(9, 4);
        let x = Tensor::from_parts(vec![3, 4], rng.gauss_vec(12));
        let w = Tensor::from_parts(vec![4, 4], rng.gauss_vec(16));
        let mask =
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let report = finite_diff_check(
            &[("x".to_string(), x), ("w".to_string(), w)],
            1e-5,
            1e-4,
            |tape, vars| {
                let h = tape.linear(vars[0], vars[1])?;
                let h = tape.gelu(h);
                let hb = tape.reshape(h, &[1, 3, 4])?;
                let scores = tape.bmm_nt(hb, hb)?;
                let scores = tape.reshape(scores, &[3, 3])?;
                let att = tape.masked_softmax(scores, &mask, false)?;
                let out = tape.matmul(att, h)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.mean_all(sq))
            },
        )
        .unwrap();
        assert!(report.pass, "max rel err {} worst {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn gather_and_permute_finite_diff() {
        let mut rng = Rng::new(21, 0);
        let table = Tensor::from_parts(vec![5, 3], rng.gauss_vec(15));
        let ids = vec![4usize, 0, 0, 2];
        let report = finite_diff_check(
            &[("table".to_string(), table)],
            1e-5,
            1e-8,
            |tape, vars| {
                let rows = tape.gather_rows(vars[0], &ids)?;
                let p = tape.permute(rows, &[1, 0])?;
                let e = tape.exp(p);
                let l = tape.ln(e);
                let t = tape.tanh(l);
                let s = tape.mul(t, t)?;
                Ok(tape.sum_all(s))
            },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn broadcast_add_mul_gradients() {
        let mut rng = Rng::new(2, 8);
        let x = Tensor::from_parts(vec![3, 4], rng.gauss_vec(12));
        let b = Tensor::from_parts(vec![4], rng.gauss_vec(4));
        let c = Tensor::from_parts(vec![3, 1], rng.gauss_vec(3));
        let report = finite_diff_check(
            &[("x".into(), x), ("b".into(), b), ("c".into(), c)],
            1e-5,
            1e-8,
            |tape, vars| {
                let y = tape.add(vars[0], vars[1])?;
                let z = tape.mul(y, vars[2])?;
                let sq = tape.mul(z, z)?;
                let r = tape.rsqrt_eps(sq, 0.3);
                Ok(tape.sum_all(r))
            },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = GradTape::new();
        let used = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(&[2, 2]));
        let loss = tape.mul(used, used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get(used).unwrap().data()[0], 4.0);
    }
}
