//! Word-problem state tracking over the permutation group of five elements,
//! solved exactly by an explicit four-layer network.
//!
//! Tokens 1..=10 name the transpositions of [5] in a fixed canonical order,
//! token 11 is the beginning-of-sequence marker. The task: for every prefix,
//! decide whether the composed permutation is the identity. Two independent
//! brute-force oracles (integer matrix products and permutation-map
//! composition) provide ground truth; the constructed network must agree
//! exactly.
//!
//! The construction encodes each transposition as the Householder vector
//! xi_n = d_src - d_dst, accumulates the reflection products through a
//! masked triangular solve (the WY representation), and reads off identity
//! via a thresholded attention head. All layer weights are fixed constants;
//! nothing is learned.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{lu_solve, unit_lower_solve, Permutation};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Vocabulary id of the beginning-of-sequence token.
pub const BOS_TOKEN: usize = 11;
/// Number of distinct transpositions of five elements.
pub const SWAP_COUNT: usize = 10;
/// Rotation dimension of the construction (5 permuted lanes + 1 spare).
pub const R_DIM: usize = 6;

/// Canonical enumeration of the 10 transpositions of [5], 0-indexed pairs
/// (src, dst) with src < dst, lexicographic.
#[derive(Clone, Copy, Debug)]
pub struct SwapTable;

const PAIRS: [(usize, usize); SWAP_COUNT] =
    [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)];

impl SwapTable {
    /// (src, dst) of transposition id n (1-based, 1..=10).
    pub fn pair(n: usize) -> Result<(usize, usize)> {
        if n == 0 || n > SWAP_COUNT {
            return Err(Error::Contract {
                op: "SwapTable::pair",
                details: format!("transposition id {n} outside 1..=10"),
            });
        }
        Ok(PAIRS[n - 1])
    }

    /// The Householder vector xi_n = d_src - d_dst in R^6; zero for BOS.
    pub fn xi(n: usize) -> Result<Tensor> {
        let mut v = Tensor::zeros(&[R_DIM]);
        if n == BOS_TOKEN {
            return Ok(v);
        }
        let (s, d) = Self::pair(n)?;
        v.set(&[s], 1.0);
        v.set(&[d], -1.0);
        Ok(v)
    }

    /// The full embedding table Xi in R^{11 x 6}: rows 1..=10 are the
    /// Householder vectors, row 11 (BOS) is zero.
    pub fn xi_matrix() -> Tensor {
        Tensor::from_fn(&[BOS_TOKEN, R_DIM], |idx| {
            let n = idx[0] + 1;
            if n == BOS_TOKEN {
                0.0
            } else {
                let (s, d) = PAIRS[n - 1];
                if idx[1] == s {
                    1.0
                } else if idx[1] == d {
                    -1.0
                } else {
                    0.0
                }
            }
        })
    }
}

/// 5x5 permutation matrix of transposition id n, via the reflection form
/// S = I - xi xi^T restricted to the first five lanes.
pub fn swap_matrix(n: usize) -> Result<Tensor> {
    let (s, d) = SwapTable::pair(n)?;
    let mut m = Tensor::eye(5);
    m.set(&[s, s], 0.0);
    m.set(&[d, d], 0.0);
    m.set(&[s, d], 1.0);
    m.set(&[d, s], 1.0);
    Ok(m)
}

/// A word-problem input: BOS followed by transposition ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordProblemInstance {
    pub u: Vec<usize>,
}

impl WordProblemInstance {
    pub fn new(u: Vec<usize>) -> Result<Self> {
        if u.first() != Some(&BOS_TOKEN) {
            return Err(Error::Contract {
                op: "WordProblemInstance::new",
                details: "sequence must start with the BOS token (11)".into(),
            });
        }
        if u[1..].iter().any(|&t| t == 0 || t > SWAP_COUNT) {
            return Err(Error::Contract {
                op: "WordProblemInstance::new",
                details: "non-BOS tokens must be transposition ids 1..=10".into(),
            });
        }
        Ok(WordProblemInstance { u })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Labels via exact integer 5x5 matrix composition: y[i] = 1 iff the
/// product of the first i+1 tokens' matrices is the identity (BOS acts as
/// the identity).
pub fn oracle_labels(inst: &WordProblemInstance) -> Vec<bool> {
    let mut prod = [[0i64; 5]; 5];
    for (v, row) in prod.iter_mut().enumerate() {
        row[v] = 1;
    }
    let mut labels = Vec::with_capacity(inst.len());
    for &tok in &inst.u {
        if tok != BOS_TOKEN {
            let (s, d) = PAIRS[tok - 1];
            // multiply on the right by the transposition: swap columns s, d
            for row in prod.iter_mut() {
                row.swap(s, d);
            }
        }
        let is_id = (0..5).all(|v| prod[v][v] == 1);
        labels.push(is_id);
    }
    labels
}

/// Second, independent oracle via permutation-map composition.
pub fn oracle_labels_permmap(inst: &WordProblemInstance) -> Vec<bool> {
    let mut perm = Permutation::identity(5);
    let mut labels = Vec::with_capacity(inst.len());
    for &tok in &inst.u {
        if tok != BOS_TOKEN {
            let (s, d) = PAIRS[tok - 1];
            let mut map: Vec<usize> = (0..5).collect();
            map.swap(s, d);
            let swap = Permutation::from_map(map).expect("swap is a permutation");
            perm = perm.compose(&swap);
        }
        labels.push(perm.is_identity());
    }
    labels
}

/// Uniformly random instance of length n (BOS + n-1 transposition ids)
/// with its oracle labels.
pub fn gen_word_problem(n: usize, rng: &mut Rng) -> Result<(WordProblemInstance, Vec<bool>)> {
    if n == 0 {
        return Err(Error::Contract { op: "gen_word_problem", details: "n must be >= 1".into() });
    }
    let mut u = Vec::with_capacity(n);
    u.push(BOS_TOKEN);
    for _ in 1..n {
        u.push(rng.range_inclusive(1, SWAP_COUNT));
    }
    let inst = WordProblemInstance::new(u)?;
    let labels = oracle_labels(&inst);
    Ok((inst, labels))
}

/// Strictly lower-triangular mask (j < i).
pub fn strict_lower_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |idx| if idx[1] < idx[0] { 1.0 } else { 0.0 })
}

/// Residual of the WY representation of cumulative Householder products:
/// max over prefixes i of the max-abs difference between
/// prod_{j<=i} (I - xi_j xi_j^T) and I - sum_{j<=i} w_j xi_j^T, where
/// W solves (I + M o Xi Xi^T) W = Xi with M strictly lower-triangular.
pub fn wy_check(xi: &Tensor) -> Result<f64> {
    if xi.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "wy_check",
            shape: xi.shape().to_vec(),
            details: "expected [N, R]".into(),
        });
    }
    let (n, r) = (xi.shape()[0], xi.shape()[1]);
    let gram = xi.matmul_nt(xi)?;
    let mask = strict_lower_mask(n);
    let mut a = Tensor::eye(n);
    for i in 0..n {
        for j in 0..i {
            a.set(&[i, j], mask.at(&[i, j]) * gram.at(&[i, j]));
        }
    }
    let w = unit_lower_solve(&a, xi)?;

    let mut lhs = Tensor::eye(r);
    let mut rhs_sum = Tensor::zeros(&[r, r]);
    let mut worst = 0.0f64;
    for i in 0..n {
        let xi_i = Tensor::from_fn(&[r, 1], |idx| xi.at(&[i, idx[0]]));
        let w_i = Tensor::from_fn(&[r, 1], |idx| w.at(&[i, idx[0]]));
        let refl = Tensor::eye(r).sub(&xi_i.matmul_nt(&xi_i)?)?;
        lhs = lhs.matmul(&refl)?;
        rhs_sum = rhs_sum.add(&w_i.matmul_nt(&xi_i)?)?;
        let rhs = Tensor::eye(r).sub(&rhs_sum)?;
        worst = worst.max(lhs.max_abs_diff(&rhs)?);
    }
    Ok(worst)
}

// ── the explicit four-layer construction ────────────────────────────

/// Fixed weights of the construction. The structured per-token maps of the
/// intermediate layers are built from `xi`; the output head uses the two
/// read-out vectors and the identity threshold.
#[derive(Clone, Debug)]
pub struct ConstructedNet {
    /// Token embedding of Householder vectors, [11, 6].
    pub xi: Tensor,
    /// Query read-out [1, 2, 3, 4, 5, threshold].
    pub query: Tensor,
    /// Key read-out [1, 2, 3, 4, 5, -1], active on BOS only.
    pub key: Tensor,
    /// Identity threshold 54.5 = (sum of v^2 for v in 1..=5) - 1/2.
    pub threshold: f64,
    /// Decision epsilon: predict identity iff score > eps.
    pub eps: f64,
}

/// Deterministic construction weights.
pub fn build_construction() -> ConstructedNet {
    let threshold = 54.5;
    let query =
        Tensor::new(vec![R_DIM], vec![1.0, 2.0, 3.0, 4.0, 5.0, threshold]).expect("finite");
    let key = Tensor::new(vec![R_DIM], vec![1.0, 2.0, 3.0, 4.0, 5.0, -1.0]).expect("finite");
    ConstructedNet { xi: SwapTable::xi_matrix(), query, key, threshold, eps: 1e-9 }
}

/// One-hot token features, [N, 11].
pub fn one_hot_tokens(inst: &WordProblemInstance) -> Tensor {
    let n = inst.len();
    Tensor::from_fn(&[n, BOS_TOKEN], |idx| if inst.u[idx[0]] == idx[1] + 1 { 1.0 } else { 0.0 })
}

/// Initial encoding: every token carries [Xi^T; I_6] stacked, [N, 17, 6].
pub fn initial_encoding(n: usize) -> Tensor {
    let xi = SwapTable::xi_matrix();
    Tensor::from_fn(&[n, BOS_TOKEN + R_DIM, R_DIM], |idx| {
        let (row, col) = (idx[1], idx[2]);
        if row < BOS_TOKEN {
            xi.at(&[row, col])
        } else if row - BOS_TOKEN == col {
            1.0
        } else {
            0.0
        }
    })
}

/// Layer 1 encoding update: e'_i = psi1(x_i) e_i with
/// psi1(x) = [[x^T, 0]; [0, 0]; [0, I_6]], mapping [17, 6] rows to [8, 6].
pub fn layer1_g(x: &Tensor, e: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let rows = e.shape()[1];
    if rows != c + R_DIM || e.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            op: "layer1_g",
            left: x.shape().to_vec(),
            right: e.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[n, 2 + R_DIM, R_DIM]);
    for i in 0..n {
        for col in 0..R_DIM {
            let mut acc = 0.0;
            for k in 0..c {
                acc += x.at(&[i, k]) * e.at(&[i, k, col]);
            }
            out.set(&[i, 0, col], acc);
            for k in 0..R_DIM {
                out.set(&[i, 2 + k, col], e.at(&[i, c + k, col]));
            }
        }
    }
    Ok(out)
}

/// Layer 2 feature update: prepend a zero channel, [N, C] -> [N, C+1].
pub fn layer2_f(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let c = x.shape()[1];
    Tensor::from_fn(&[n, c + 1], |idx| if idx[1] == 0 { 0.0 } else { x.at(&[idx[0], idx[1] - 1]) })
}

/// Layer 2 encoding update: masked resolvent mixing of the first encoding
/// rows. With first rows f_j = e_j[0, :], logits B~_{ij} = f_i . f_j, the
/// mixing weights are (I + M o B~)^{-1}; the mixed vector lands in row 1 on
/// top of the residual. Uses the fast unit-lower solve when the mask is
/// strictly lower-triangular, a general LU solve otherwise.
pub fn layer2_g(x: &Tensor, e: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let _ = x; // weights for this path read only the encoding
    let n = e.shape()[0];
    let r = e.shape()[2];
    let first = Tensor::from_fn(&[n, r], |idx| e.at(&[idx[0], 0, idx[1]]));
    let gram = first.matmul_nt(&first)?;
    let mut a = Tensor::eye(n);
    let mut strictly_lower = true;
    for i in 0..n {
        for j in 0..n {
            let m = mask.at(&[i, j]);
            if m != 0.0 {
                if j >= i {
                    strictly_lower = false;
                }
                let v = a.at(&[i, j]) + m * gram.at(&[i, j]);
                a.set(&[i, j], v);
            }
        }
    }
    let y = if strictly_lower { unit_lower_solve(&a, &first)? } else { lu_solve(&a, &first)? };
    let mut out = e.clone();
    for i in 0..n {
        for col in 0..r {
            let v = out.at(&[i, 1, col]) + y.at(&[i, col]);
            out.set(&[i, 1, col], v);
        }
    }
    Ok(out)
}

/// Layer 2 pointwise encoding update: e'_i = psi2(x_i) e~_i where psi2
/// scatters (Xi^T x)_r times row 1 into rows 0..6 and copies rows 2..8.
pub fn layer2_g_ffn(xi: &Tensor, x: &Tensor, e: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let r = e.shape()[2];
    if e.shape()[1] != 2 + R_DIM || xi.shape()[1] != R_DIM {
        return Err(Error::ShapeMismatch {
            op: "layer2_g_ffn",
            left: xi.shape().to_vec(),
            right: e.shape().to_vec(),
        });
    }
    let coeff = x.matmul(xi)?; // [N, 6] = Xi^T x per token
    let mut out = Tensor::zeros(&[n, 2 * R_DIM, r]);
    for i in 0..n {
        for k in 0..R_DIM {
            for col in 0..r {
                out.set(&[i, k, col], coeff.at(&[i, k]) * e.at(&[i, 1, col]));
                out.set(&[i, R_DIM + k, col], e.at(&[i, 2 + k, col]));
            }
        }
    }
    Ok(out)
}

/// Layer 3 feature update: masked neighborhood mean of the BOS indicator
/// (last input coordinate) into channel 0, plus residual.
pub fn layer3_f(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let mut out = x.clone();
    for i in 0..n {
        let mut count = 0.0;
        let mut acc = 0.0;
        for j in 0..n {
            let m = mask.at(&[i, j]);
            if m != 0.0 {
                count += m;
                acc += m * x.at(&[j, c - 1]);
            }
        }
        if count == 0.0 {
            return Err(Error::Contract { op: "layer3_f", details: format!("mask row {i} empty") });
        }
        out.set(&[i, 0], x.at(&[i, 0]) + acc / count);
    }
    Ok(out)
}

/// Layer 3 encoding update: masked mean of the encodings, then the
/// pointwise map psi3(x) = [-(x_0)^{-1} I_6 | I_6] collapsing [12, 6]
/// rows to [6, 6].
pub fn layer3_g(x_new: &Tensor, e: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let n = e.shape()[0];
    let rows = e.shape()[1];
    let r = e.shape()[2];
    if rows != 2 * R_DIM {
        return Err(Error::InvalidShape {
            op: "layer3_g",
            shape: e.shape().to_vec(),
            details: "expected 12 encoding rows".into(),
        });
    }
    let mut out = Tensor::zeros(&[n, R_DIM, r]);
    for i in 0..n {
        let mut count = 0.0;
        for j in 0..n {
            count += mask.at(&[i, j]);
        }
        if count == 0.0 {
            return Err(Error::Contract { op: "layer3_g", details: format!("mask row {i} empty") });
        }
        let x0 = x_new.at(&[i, 0]);
        if x0 == 0.0 {
            return Err(Error::Numeric {
                op: "layer3_g",
                details: format!("psi3 scale 1/x_0 undefined at token {i}"),
            });
        }
        for k in 0..R_DIM {
            for col in 0..r {
                let mut top = 0.0;
                let mut bottom = 0.0;
                for j in 0..n {
                    let m = mask.at(&[i, j]);
                    if m != 0.0 {
                        top += m * e.at(&[j, k, col]);
                        bottom += m * e.at(&[j, R_DIM + k, col]);
                    }
                }
                out.set(&[i, k, col], (-1.0 / x0) * (top / count) + bottom / count);
            }
        }
    }
    Ok(out)
}

/// Layer 4: thresholded read-out. Pre-softmax logits
/// A~_{ij} = (sum_k x_i[k>=1]) * bos_j * query^T (e_j e_i^T) key; after the
/// masked softmax the BOS column weight is compared against the uniform
/// share through the hard-sigmoid head
/// score_i = min(1, max(0, bos_i + A_{i,bos} - x~_i[0])).
///
/// Returns (scores, bos-column pre-softmax logits).
pub fn layer4_f(net: &ConstructedNet, x: &Tensor, e: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let r = e.shape()[2];
    if e.shape()[1] != R_DIM || r != R_DIM {
        return Err(Error::InvalidShape {
            op: "layer4_f",
            shape: e.shape().to_vec(),
            details: "expected [N, 6, 6] encodings".into(),
        });
    }
    // per-token read-outs: a_j = e_j^T key is needed against e_i^T via
    // query^T e_j e_i^T key = (e_j^T query) . (e_i^T key)... note the
    // asymmetric phi(e_i, e_j) = e_j e_i^T ordering
    let mut logits = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let s1: f64 = (1..c).map(|k| x.at(&[i, k])).sum();
        for j in 0..n {
            let bos = x.at(&[j, c - 1]);
            if bos == 0.0 || s1 == 0.0 {
                continue;
            }
            // query^T e_j e_i^T key
            let mut acc = 0.0;
            for a in 0..R_DIM {
                let qe: f64 = (0..R_DIM).map(|b| net.query.at(&[b]) * e.at(&[j, b, a])).sum();
                let ke: f64 = (0..R_DIM).map(|b| net.key.at(&[b]) * e.at(&[i, b, a])).sum();
                acc += qe * ke;
            }
            logits.set(&[i, j], s1 * bos * acc);
        }
    }
    let attn = logits.masked_softmax_last(mask, false)?;
    let mut scores = Tensor::zeros(&[n]);
    let mut bos_logits = Tensor::zeros(&[n]);
    for i in 0..n {
        let mut mixed = 0.0; // sum_j A_ij * bos_j
        for j in 0..n {
            mixed += attn.at(&[i, j]) * x.at(&[j, c - 1]);
        }
        let x0_new = x.at(&[i, 0]) - mixed;
        let bos_i = x.at(&[i, c - 1]);
        let pre = bos_i - x0_new;
        scores.set(&[i], pre.clamp(0.0, 1.0));
        // report the logit against the first unmasked BOS key, if any
        let mut bl = 0.0;
        for j in 0..n {
            if mask.at(&[i, j]) != 0.0 && x.at(&[j, c - 1]) != 0.0 {
                bl = logits.at(&[i, j]);
                break;
            }
        }
        bos_logits.set(&[i], bl);
    }
    Ok((scores, bos_logits))
}

/// Scores, decisions, and BOS-column logits for one instance.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub scores: Vec<f64>,
    pub decisions: Vec<bool>,
    pub bos_logits: Vec<f64>,
}

/// Run the construction end to end on one instance. Scores are exactly 0
/// at non-identity positions and strictly positive at identity positions;
/// the decision rule is score > eps.
pub fn run_construction(net: &ConstructedNet, inst: &WordProblemInstance) -> Result<RunOutcome> {
    let n = inst.len();
    let x0 = one_hot_tokens(inst);
    let e0 = initial_encoding(n);
    let causal = crate::model::causal_mask(n);
    let strict = strict_lower_mask(n);

    // layer 1: features unchanged, encoding compressed per token
    let e1 = layer1_g(&x0, &e0)?;
    // layer 2: zero channel in front; masked resolvent mixing (strict mask),
    // then the pointwise outer-product map
    let x2 = layer2_f(&x0);
    let e2_mid = layer2_g(&x0, &e1, &strict)?;
    let e2 = layer2_g_ffn(&SwapTable::xi_matrix(), &x0, &e2_mid)?;
    // layer 3: neighborhood means (inclusive mask) and the collapse to 6x6
    let x3 = layer3_f(&x2, &causal)?;
    let e3 = layer3_g(&x3, &e2, &causal)?;
    // layer 4: thresholded read-out
    let (scores, bos_logits) = layer4_f(net, &x3, &e3, &causal)?;

    if !scores.is_finite() {
        return Err(Error::Numeric { op: "run_construction", details: "non-finite score".into() });
    }
    let decisions = scores.data().iter().map(|&s| s > net.eps).collect();
    Ok(RunOutcome {
        scores: scores.data().to_vec(),
        decisions,
        bos_logits: bos_logits.data().to_vec(),
    })
}

/// The cumulative 6x6 products the third-layer encodings must match:
/// e3_i^T = prod_{j<=i} (I - xi_{u_j} xi_{u_j}^T).
pub fn householder_prefix_products(inst: &WordProblemInstance) -> Result<Vec<Tensor>> {
    let mut prod = Tensor::eye(R_DIM);
    let mut out = Vec::with_capacity(inst.len());
    for &tok in &inst.u {
        let xi = SwapTable::xi(tok)?;
        let xi_col = xi.reshape(&[R_DIM, 1])?;
        let refl = Tensor::eye(R_DIM).sub(&xi_col.matmul_nt(&xi_col)?)?;
        prod = prod.matmul(&refl)?;
        out.push(prod.clone());
    }
    Ok(out)
}

/// Accuracy and margin statistics for one sequence length.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub instances: usize,
    pub mismatches: usize,
    /// Smallest score over identity positions (should stay positive).
    pub min_identity_score: f64,
    /// Largest score over non-identity positions (0 when exact).
    pub max_nonidentity_score: f64,
}

/// Compare construction decisions against the oracle over random instances
/// for each length in `lengths`.
pub fn accuracy_sweep(
    lengths: &[usize],
    instances_per_n: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    let net = build_construction();
    lengths
        .iter()
        .map(|&n| {
            let rows: Vec<(usize, f64, f64)> = (0..instances_per_n)
                .into_par_iter()
                .map(|k| {
                    let mut rng = Rng::new(seed, (n as u64) << 32 | k as u64);
                    let (inst, labels) = gen_word_problem(n, &mut rng)?;
                    let out = run_construction(&net, &inst)?;
                    let mut mism = 0usize;
                    let mut min_id = f64::INFINITY;
                    let mut max_non = 0.0f64;
                    for i in 0..n {
                        if out.decisions[i] != labels[i] {
                            mism += 1;
                        }
                        if labels[i] {
                            min_id = min_id.min(out.scores[i]);
                        } else {
                            max_non = max_non.max(out.scores[i]);
                        }
                    }
                    Ok((mism, min_id, max_non))
                })
                .collect::<Result<_>>()?;
            let mut row = SweepRow {
                n,
                instances: instances_per_n,
                mismatches: 0,
                min_identity_score: f64::INFINITY,
                max_nonidentity_score: 0.0,
            };
            for (m, mi, mn) in rows {
                row.mismatches += m;
                row.min_identity_score = row.min_identity_score.min(mi);
                row.max_nonidentity_score = row.max_nonidentity_score.max(mn);
            }
            Ok(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swap_matrices_are_involutions_with_det_minus_one() {
        for n in 1..=SWAP_COUNT {
            let s = swap_matrix(n).unwrap();
            let s2 = s.matmul(&s).unwrap();
            assert_eq!(s2, Tensor::eye(5), "S^2 != I for id {n}");
            let d = crate::linalg::det(&s).unwrap();
            assert!((d + 1.0).abs() < 1e-12, "det {d} for id {n}");
        }
        assert!(swap_matrix(0).is_err());
        assert!(swap_matrix(11).is_err());
    }

    #[test]
    fn swap_one_two_exchanges_first_rows() {
        let s = swap_matrix(1).unwrap(); // (1 <-> 2) in 1-based terms
        assert_eq!(s.at(&[0, 1]), 1.0);
        assert_eq!(s.at(&[1, 0]), 1.0);
        assert_eq!(s.at(&[2, 2]), 1.0);
    }

    #[test]
    fn swap_matrix_matches_reflection_form() {
        for n in 1..=SWAP_COUNT {
            let s = swap_matrix(n).unwrap();
            let xi = SwapTable::xi(n).unwrap().reshape(&[R_DIM, 1]).unwrap();
            let refl = Tensor::eye(R_DIM).sub(&xi.matmul_nt(&xi).unwrap()).unwrap();
            for a in 0..5 {
                for b in 0..5 {
                    assert_eq!(s.at(&[a, b]), refl.at(&[a, b]));
                }
            }
            // spare lane untouched
            assert_eq!(refl.at(&[5, 5]), 1.0);
        }
    }

    #[test]
    fn oracle_basics() {
        let bos_only = WordProblemInstance::new(vec![BOS_TOKEN]).unwrap();
        assert_eq!(oracle_labels(&bos_only), vec![true]);

        let inst = WordProblemInstance::new(vec![BOS_TOKEN, 1, 1]).unwrap();
        assert_eq!(oracle_labels(&inst), vec![true, false, true]);
    }

    #[test]
    fn dual_oracles_agree() {
        let mut rng = Rng::new(31, 0);
        for _ in 0..50 {
            let (inst, labels) = gen_word_problem(64, &mut rng).unwrap();
            assert_eq!(labels, oracle_labels_permmap(&inst));
        }
    }

    #[test]
    fn gen_word_problem_contracts() {
        let mut rng = Rng::new(32, 0);
        let (inst, labels) = gen_word_problem(1, &mut rng).unwrap();
        assert_eq!(inst.u, vec![BOS_TOKEN]);
        assert_eq!(labels, vec![true]);

        let a = gen_word_problem(16, &mut Rng::new(5, 9)).unwrap();
        let b = gen_word_problem(16, &mut Rng::new(5, 9)).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn identity_rate_mixes_toward_uniform() {
        // a product of transpositions can be the identity only when their
        // count is even, so probe a position with 20 swaps; by then the
        // walk is essentially uniform over the 60 even permutations
        let mut rng = Rng::new(33, 0);
        let samples = 100_000;
        let mut odd_hits = 0usize;
        let mut hits = 0usize;
        for _ in 0..samples {
            let (_, labels) = gen_word_problem(21, &mut rng).unwrap();
            if labels[19] {
                odd_hits += 1; // 19 swaps: impossible
            }
            if labels[20] {
                hits += 1; // 20 swaps
            }
        }
        assert_eq!(odd_hits, 0, "odd-parity prefix can never be the identity");
        let p = hits as f64 / samples as f64;
        let expect = 1.0 / 60.0;
        let sigma = (expect * (1.0 - expect) / samples as f64).sqrt();
        assert!(
            (p - expect).abs() < 5.0 * sigma,
            "identity rate {p} vs {expect} (sigma {sigma})"
        );
    }

    #[test]
    fn wy_identity_small_cases() {
        // N = 1: both sides are I - xi xi^T, residual 0
        let xi = Tensor::new(vec![1, 3], vec![0.3, -0.7, 0.2]).unwrap();
        assert_eq!(wy_check(&xi).unwrap(), 0.0);

        // N = 2 random
        let mut rng = Rng::new(34, 0);
        let xi = Tensor::from_parts(vec![2, 4], rng.gauss_vec(8));
        assert!(wy_check(&xi).unwrap() <= 1e-12);
    }

    #[test]
    fn wy_identity_gaussian_and_swap_rows() {
        // rows with expected unit norm keep the reflections contractive;
        // unscaled rows make the prefix products blow up exponentially and
        // the comparison numerically vacuous
        let scale = 1.0 / (R_DIM as f64).sqrt();
        let mut rng = Rng::new(35, 0);
        for n in [4usize, 8, 16, 32] {
            let xi = Tensor::from_parts(
                vec![n, R_DIM],
                rng.gauss_vec(n * R_DIM).iter().map(|v| v * scale).collect(),
            );
            let resid = wy_check(&xi).unwrap();
            assert!(resid <= 1e-8, "n={n} residual {resid}");
            // conditioning sanity: growth at most linear in n
            assert!(resid <= (n as f64) * 1e-13, "n={n} residual {resid} grows too fast");
        }
        // swap-table rows (norm^2 = 2): reflections are orthogonal
        let (inst, _) = gen_word_problem(24, &mut rng).unwrap();
        let xi = Tensor::from_fn(&[24, R_DIM], |idx| {
            SwapTable::xi(inst.u[idx[0]]).unwrap().at(&[idx[1]])
        });
        assert!(wy_check(&xi).unwrap() <= 1e-10);
    }

    #[test]
    fn construction_traces_match_closed_forms() {
        let mut rng = Rng::new(36, 0);
        let (inst, _) = gen_word_problem(12, &mut rng).unwrap();
        let n = inst.len();
        let x0 = one_hot_tokens(&inst);
        let e0 = initial_encoding(n);

        // layer 1 picks out the token's Householder row
        let e1 = layer1_g(&x0, &e0).unwrap();
        for i in 0..n {
            let xi = SwapTable::xi(inst.u[i]).unwrap();
            for col in 0..R_DIM {
                assert_eq!(e1.at(&[i, 0, col]), xi.at(&[col]));
                assert_eq!(e1.at(&[i, 1, col]), 0.0);
                for k in 0..R_DIM {
                    let want = if k == col { 1.0 } else { 0.0 };
                    assert_eq!(e1.at(&[i, 2 + k, col]), want);
                }
            }
        }

        // BOS row of the first layer output is zero
        assert_eq!(inst.u[0], BOS_TOKEN);
        for col in 0..R_DIM {
            assert_eq!(e1.at(&[0, 0, col]), 0.0);
        }

        // layer 3 encodings transpose into the Householder prefix products
        let strict = strict_lower_mask(n);
        let causal = crate::model::causal_mask(n);
        let x2 = layer2_f(&x0);
        let e2 = layer2_g_ffn(
            &SwapTable::xi_matrix(),
            &x0,
            &layer2_g(&x0, &e1, &strict).unwrap(),
        )
        .unwrap();
        let x3 = layer3_f(&x2, &causal).unwrap();
        let e3 = layer3_g(&x3, &e2, &causal).unwrap();
        let prods = householder_prefix_products(&inst).unwrap();
        for i in 0..n {
            let e3i = Tensor::from_fn(&[R_DIM, R_DIM], |idx| e3.at(&[i, idx[0], idx[1]]));
            let want = prods[i].transpose().unwrap();
            let diff = e3i.max_abs_diff(&want).unwrap();
            assert!(diff <= 1e-10, "prefix {i}: diff {diff}");
        }

        // x3 carries 1/i in channel 0
        for i in 0..n {
            assert!((x3.at(&[i, 0]) - 1.0 / (i + 1) as f64).abs() < 1e-14);
        }
    }

    #[test]
    fn layer3_first_position_is_identity_matrix() {
        let inst = WordProblemInstance::new(vec![BOS_TOKEN, 3, 7]).unwrap();
        let n = inst.len();
        let x0 = one_hot_tokens(&inst);
        let e1 = layer1_g(&x0, &initial_encoding(n)).unwrap();
        let strict = strict_lower_mask(n);
        let causal = crate::model::causal_mask(n);
        let e2 =
            layer2_g_ffn(&SwapTable::xi_matrix(), &x0, &layer2_g(&x0, &e1, &strict).unwrap())
                .unwrap();
        let x3 = layer3_f(&layer2_f(&x0), &causal).unwrap();
        let e3 = layer3_g(&x3, &e2, &causal).unwrap();
        let first = Tensor::from_fn(&[R_DIM, R_DIM], |idx| e3.at(&[0, idx[0], idx[1]]));
        assert!(first.max_abs_diff(&Tensor::eye(R_DIM)).unwrap() <= 1e-12);
    }

    #[test]
    fn layer4_bos_logit_matches_weighted_permutation_sum() {
        let mut rng = Rng::new(37, 0);
        let net = build_construction();
        let (inst, _) = gen_word_problem(10, &mut rng).unwrap();
        let out = run_construction(&net, &inst).unwrap();

        // recompute sum_v v * pi_i(v) via the integer oracle products
        let mut prod = Tensor::eye(5);
        for (i, &tok) in inst.u.iter().enumerate() {
            if tok != BOS_TOKEN {
                prod = prod.matmul(&swap_matrix(tok).unwrap()).unwrap();
            }
            let mut weighted = 0.0;
            for a in 0..5 {
                for b in 0..5 {
                    weighted += (a + 1) as f64 * prod.at(&[a, b]) * (b + 1) as f64;
                }
            }
            let want = weighted - net.threshold;
            assert!(
                (out.bos_logits[i] - want).abs() <= 1e-10,
                "position {i}: logit {} want {want}",
                out.bos_logits[i]
            );
        }
    }

    #[test]
    fn construction_outputs_on_tiny_instances() {
        let net = build_construction();

        let bos = WordProblemInstance::new(vec![BOS_TOKEN]).unwrap();
        let out = run_construction(&net, &bos).unwrap();
        assert!(out.scores[0] > 0.0, "BOS score {}", out.scores[0]);
        assert!(out.decisions[0]);

        let one_swap = WordProblemInstance::new(vec![BOS_TOKEN, 1]).unwrap();
        let out = run_construction(&net, &one_swap).unwrap();
        assert_eq!(out.scores[1], 0.0, "non-identity score must clamp to exactly 0");
        assert!(!out.decisions[1]);
        assert!(out.decisions[0]);
    }

    #[test]
    fn construction_matches_oracle_on_random_instances() {
        let net = build_construction();
        let mut rng = Rng::new(38, 0);
        for _ in 0..200 {
            let n = rng.range_inclusive(1, 64);
            let (inst, labels) = gen_word_problem(n, &mut rng).unwrap();
            let out = run_construction(&net, &inst).unwrap();
            assert_eq!(out.decisions, labels, "instance {:?}", inst.u);
        }
    }

    #[test]
    fn identity_margin_shrinks_like_one_over_i() {
        // all-identity prefix scores: with pairs repeated (s, s) the prefix
        // is identity at even positions; margins there behave like c / i
        let net = build_construction();
        let mut u = vec![BOS_TOKEN];
        for _ in 0..16 {
            u.push(4);
            u.push(4);
        }
        let inst = WordProblemInstance::new(u).unwrap();
        let out = run_construction(&net, &inst).unwrap();
        let labels = oracle_labels(&inst);
        let mut last = f64::INFINITY;
        for i in (0..inst.len()).step_by(2) {
            assert!(labels[i]);
            assert!(out.scores[i] > 0.0);
            if i > 0 {
                assert!(out.scores[i] < last, "margin must shrink with i");
                last = out.scores[i];
            }
        }
        // roughly Theta(1/i): score at i within a constant of (e^0.5-1)/i
        let i = inst.len() - 1;
        let c = out.scores[i] * i as f64;
        assert!(c > 0.1 && c < 2.0, "scaled margin {c}");
    }

    #[test]
    fn sweep_reports_perfect_agreement_at_small_sizes() {
        let rows = accuracy_sweep(&[8, 16], 50, 99).unwrap();
        for row in rows {
            assert_eq!(row.mismatches, 0, "n={}", row.n);
            assert!(row.min_identity_score > 0.0);
            assert_eq!(row.max_nonidentity_score, 0.0);
        }
    }

    #[test]
    fn construction_layers_pass_equivariance_harness() {
        use crate::equivariance::{
            check_ortho_equivariance, check_perm_equivariance, HarnessSpec, MaskKind, OutputLaw,
        };
        let c = BOS_TOKEN;
        let trials = 6;
        let tol = 1e-8;

        // layer 1 encoding map
        let spec = HarnessSpec {
            n: 7,
            c,
            e_shape: vec![7, c + R_DIM, R_DIM],
            mask: MaskKind::LowerTriangular,
        };
        let l1 = |x: &Tensor, e: &Tensor, _m: &Tensor| layer1_g(x, e);
        let rep = check_perm_equivariance("nc1_layer1_g", l1, OutputLaw::PermuteEquivariant, &spec, trials, tol, 301).unwrap();
        assert!(rep.pass, "layer1 perm: {}", rep.max_deviation);
        let rep = check_ortho_equivariance("nc1_layer1_g", l1, OutputLaw::PermuteEquivariant, &spec, trials, tol, 302).unwrap();
        assert!(rep.pass, "layer1 ortho: {}", rep.max_deviation);

        // layer 2 resolvent mixing
        let spec = HarnessSpec {
            n: 7,
            c,
            e_shape: vec![7, 2 + R_DIM, R_DIM],
            mask: MaskKind::LowerTriangular,
        };
        let l2 = |x: &Tensor, e: &Tensor, m: &Tensor| layer2_g(x, e, m);
        let rep = check_perm_equivariance("nc1_layer2_g", l2, OutputLaw::PermuteEquivariant, &spec, trials, tol, 303).unwrap();
        assert!(rep.pass, "layer2 perm: {}", rep.max_deviation);
        let rep = check_ortho_equivariance("nc1_layer2_g", l2, OutputLaw::PermuteEquivariant, &spec, trials, tol, 304).unwrap();
        assert!(rep.pass, "layer2 ortho: {}", rep.max_deviation);

        // layer 3 collapse; shift channel 0 away from zero so psi3 is tame
        let spec = HarnessSpec {
            n: 7,
            c: c + 1,
            e_shape: vec![7, 2 * R_DIM, R_DIM],
            mask: MaskKind::LowerTriangular,
        };
        let l3 = |x: &Tensor, e: &Tensor, m: &Tensor| {
            let shifted = Tensor::from_fn(&[x.shape()[0], x.shape()[1]], |idx| {
                x.at(&[idx[0], idx[1]]) + if idx[1] == 0 { 3.0 } else { 0.0 }
            });
            layer3_g(&shifted, e, m)
        };
        let rep = check_perm_equivariance("nc1_layer3_g", l3, OutputLaw::PermuteEquivariant, &spec, trials, tol, 305).unwrap();
        assert!(rep.pass, "layer3 perm: {}", rep.max_deviation);
        let rep = check_ortho_equivariance("nc1_layer3_g", l3, OutputLaw::PermuteEquivariant, &spec, trials, tol, 306).unwrap();
        assert!(rep.pass, "layer3 ortho: {}", rep.max_deviation);

        // layer 4 read-out is rotation-invariant and permutation-equivariant
        let net = build_construction();
        let spec = HarnessSpec {
            n: 7,
            c: c + 1,
            e_shape: vec![7, R_DIM, R_DIM],
            mask: MaskKind::LowerTriangular,
        };
        let l4 = |x: &Tensor, e: &Tensor, m: &Tensor| layer4_f(&net, x, e, m).map(|(s, _)| s);
        let rep = check_perm_equivariance("nc1_layer4_f", l4, OutputLaw::PermuteInvariant, &spec, trials, tol, 307).unwrap();
        assert!(rep.pass, "layer4 perm: {}", rep.max_deviation);
        let rep = check_ortho_equivariance("nc1_layer4_f", l4, OutputLaw::PermuteInvariant, &spec, trials, tol, 308).unwrap();
        assert!(rep.pass, "layer4 ortho: {}", rep.max_deviation);
    }
}
