//! Tensorial positional encodings.
//!
//! A positional encoding assigns every token index a stack of M blocks,
//! each holding L row vectors of dimension R, replicated across H heads:
//! logical shape (N, H, M, L, R). Rotary and reweighted random-Fourier
//! initializations are supported, together with the phase-shift operator
//! that turns an index offset into a per-block orthogonal matrix acting on
//! the R axis.

use crate::error::{Error, Result};
use crate::linalg::apply_last_axis;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Shape metadata for a positional encoding tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeMeta {
    pub n: usize,
    pub heads: usize,
    pub blocks: usize,
    pub l: usize,
    pub r: usize,
}

impl PeMeta {
    pub fn new(n: usize, heads: usize, blocks: usize, l: usize, r: usize) -> Result<Self> {
        if n == 0 || heads == 0 || blocks == 0 || l == 0 || r == 0 {
            return Err(Error::Config {
                details: format!("positional meta dims must be >= 1, got ({n},{heads},{blocks},{l},{r})"),
            });
        }
        Ok(PeMeta { n, heads, blocks, l, r })
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.n, self.heads, self.blocks, self.l, self.r]
    }

    /// Flattened embedding width per token, D = M * L * R (per head).
    pub fn d(&self) -> usize {
        self.blocks * self.l * self.r
    }
}

/// Positional encoding values plus their layout metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct PosTensor {
    pub meta: PeMeta,
    values: Tensor,
}

impl PosTensor {
    pub fn new(meta: PeMeta, values: Tensor) -> Result<Self> {
        if values.shape() != meta.shape().as_slice() {
            return Err(Error::ShapeMismatch {
                op: "PosTensor::new",
                left: meta.shape(),
                right: values.shape().to_vec(),
            });
        }
        if !values.is_finite() {
            return Err(Error::NonFinite { op: "PosTensor::new" });
        }
        Ok(PosTensor { meta, values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    /// The (L, R) slice at token i, head h, block m.
    pub fn slice(&self, i: usize, h: usize, m: usize) -> Tensor {
        let PeMeta { l, r, .. } = self.meta;
        Tensor::from_fn(&[l, r], |idx| self.values.at(&[i, h, m, idx[0], idx[1]]))
    }

    /// Right-multiply every slice's R axis by an orthogonal matrix.
    pub fn rotate(&self, o: &Tensor) -> Result<PosTensor> {
        Ok(PosTensor { meta: self.meta, values: apply_last_axis(&self.values, o)? })
    }

    /// Right-multiply with a distinct R x R matrix per block m ([M, R, R]).
    pub fn rotate_per_block(&self, os: &Tensor) -> Result<PosTensor> {
        let PeMeta { n, heads, blocks, l, r } = self.meta;
        if os.shape() != [blocks, r, r] {
            return Err(Error::ShapeMismatch {
                op: "rotate_per_block",
                left: vec![blocks, r, r],
                right: os.shape().to_vec(),
            });
        }
        // [N,H,M,L,R] -> [M, N*H*L, R] per-block product
        let perm = self.values.permute(&[2, 0, 1, 3, 4])?; // [M,N,H,L,R]
        let flat = perm.reshape(&[blocks, n * heads * l, r])?;
        let rotated = flat.bmm(os)?;
        let back = rotated
            .reshape(&[blocks, n, heads, l, r])?
            .permute(&[1, 2, 0, 3, 4])?;
        Ok(PosTensor { meta: self.meta, values: back })
    }
}

/// Rotary angle schedule: theta_m = sign * base^(-m / M) for m in 0..M,
/// the usual geometric decay over a head of M two-dimensional blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeSchedule {
    pub thetas: Vec<f64>,
    pub base: f64,
}

impl RopeSchedule {
    pub fn new(blocks: usize, base: f64, negative: bool) -> Result<Self> {
        if base <= 1.0 {
            return Err(Error::Config { details: format!("rope base must exceed 1, got {base}") });
        }
        let sign = if negative { -1.0 } else { 1.0 };
        let thetas = (0..blocks)
            .map(|m| sign * base.powf(-(m as f64) / blocks as f64))
            .collect();
        Ok(RopeSchedule { thetas, base })
    }

    pub fn blocks(&self) -> usize {
        self.thetas.len()
    }
}

/// Reweighted random-Fourier schedule: per-block frequency samples
/// theta[m][r] (r < R/2) and per-(m, l, r) weights, scaled by sqrt(2/R).
#[derive(Clone, Debug, PartialEq)]
pub struct FourierSchedule {
    pub freqs: Vec<Vec<f64>>,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub r: usize,
}

impl FourierSchedule {
    /// Gaussian Monte-Carlo frequencies and weights, deterministic per rng.
    pub fn sample(blocks: usize, l: usize, r: usize, freq_scale: f64, rng: &mut Rng) -> Result<Self> {
        if r % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "FourierSchedule::sample",
                shape: vec![blocks, l, r],
                details: "rotation dimension R must be even".into(),
            });
        }
        let half = r / 2;
        let freqs = (0..blocks)
            .map(|_| (0..half).map(|_| rng.gauss() * freq_scale).collect())
            .collect();
        let weights = (0..blocks)
            .map(|_| (0..l).map(|_| (0..half).map(|_| rng.gauss()).collect()).collect())
            .collect();
        Ok(FourierSchedule { freqs, weights, r })
    }

    pub fn blocks(&self) -> usize {
        self.freqs.len()
    }
}

/// Initialization family for the positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Rope(RopeSchedule),
    Fourier(FourierSchedule),
}

/// Rotary initialization: for each position i and block m the (2, 2) slice
/// is the rotation matrix by theta_m * i, rows
/// [cos, -sin] and [sin, cos], identical across heads.
///
/// Positions may be arbitrary non-negative reals to support shift tests.
pub fn rope_init(positions: &[f64], heads: usize, schedule: &RopeSchedule) -> Result<PosTensor> {
    let meta = PeMeta::new(positions.len(), heads, schedule.blocks(), 2, 2)?;
    let values = Tensor::from_fn(&meta.shape(), |idx| {
        let (i, m, l, r) = (idx[0], idx[2], idx[3], idx[4]);
        let a = schedule.thetas[m] * positions[i];
        match (l, r) {
            (0, 0) => a.cos(),
            (0, 1) => -a.sin(),
            (1, 0) => a.sin(),
            _ => a.cos(),
        }
    });
    PosTensor::new(meta, values)
}

/// Reweighted random-Fourier initialization: row (i, h, m, l) interleaves
/// w[m][l][r] * cos(theta[m][r] * i) and w[m][l][r] * sin(theta[m][r] * i),
/// scaled by sqrt(2/R); identical across heads.
pub fn fourier_init(
    positions: &[f64],
    heads: usize,
    schedule: &FourierSchedule,
) -> Result<PosTensor> {
    let l = schedule.weights.first().map(|w| w.len()).unwrap_or(0);
    let meta = PeMeta::new(positions.len(), heads, schedule.blocks(), l, schedule.r)?;
    let scale = (2.0 / schedule.r as f64).sqrt();
    let values = Tensor::from_fn(&meta.shape(), |idx| {
        let (i, m, li, r) = (idx[0], idx[2], idx[3], idx[4]);
        let pair = r / 2;
        let a = schedule.freqs[m][pair] * positions[i];
        let w = schedule.weights[m][li][pair];
        scale * w * if r % 2 == 0 { a.cos() } else { a.sin() }
    });
    PosTensor::new(meta, values)
}

/// Initialize from either schedule kind at integer positions offset..offset+n.
pub fn init_positions(offset: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| offset + i as f64).collect()
}

pub fn schedule_init(
    positions: &[f64],
    heads: usize,
    schedule: &Schedule,
) -> Result<PosTensor> {
    match schedule {
        Schedule::Rope(s) => rope_init(positions, heads, s),
        Schedule::Fourier(s) => fourier_init(positions, heads, s),
    }
}

/// The per-block orthogonal matrices O(delta) ([M, R, R]) such that
/// init(positions + delta) == init(positions) . O(delta).
pub fn phase_shift(schedule: &Schedule, delta: f64) -> Result<Tensor> {
    match schedule {
        Schedule::Rope(s) => {
            // slices are rotation matrices, so the shift composes on the right:
            // R(theta*i) . R(theta*delta) = R(theta*(i+delta))
            let m = s.blocks();
            let mut t = Tensor::zeros(&[m, 2, 2]);
            for (mi, &theta) in s.thetas.iter().enumerate() {
                let (c, sn) = ((theta * delta).cos(), (theta * delta).sin());
                t.set(&[mi, 0, 0], c);
                t.set(&[mi, 0, 1], -sn);
                t.set(&[mi, 1, 0], sn);
                t.set(&[mi, 1, 1], c);
            }
            Ok(t)
        }
        Schedule::Fourier(s) => {
            let m = s.blocks();
            let r = s.r;
            let mut t = Tensor::zeros(&[m, r, r]);
            for (mi, freqs) in s.freqs.iter().enumerate() {
                for (pair, &theta) in freqs.iter().enumerate() {
                    let (c, sn) = ((theta * delta).cos(), (theta * delta).sin());
                    let b = 2 * pair;
                    t.set(&[mi, b, b], c);
                    t.set(&[mi, b, b + 1], sn);
                    t.set(&[mi, b + 1, b], -sn);
                    t.set(&[mi, b + 1, b + 1], c);
                }
            }
            Ok(t)
        }
    }
}

/// Per-block Gram matrices e_{i,m} e_{j,m}^T between two token slices of
/// the same encoding layout: output shape [H, M, L, L]. Invariant under a
/// common right-rotation of the R axis.
pub fn gram(e: &PosTensor, i: usize, j: usize) -> Result<Tensor> {
    let PeMeta { n, heads, blocks, l, .. } = e.meta;
    if i >= n || j >= n {
        return Err(Error::Contract {
            op: "gram",
            details: format!("token indices ({i}, {j}) out of range for n={n}"),
        });
    }
    let mut out = Tensor::zeros(&[heads, blocks, l, l]);
    for h in 0..heads {
        for m in 0..blocks {
            let ei = e.slice(i, h, m);
            let ej = e.slice(j, h, m);
            let g = ei.matmul_nt(&ej)?;
            for a in 0..l {
                for b in 0..l {
                    out.set(&[h, m, a, b], g.at(&[a, b]));
                }
            }
        }
    }
    Ok(out)
}

/// N x N grid of mean-over-(h, m) traces of the pairwise Gram matrices;
/// the standard dot-product pattern used to visualize an encoding.
pub fn pe_dot_product_grid(e: &PosTensor) -> Result<Tensor> {
    let PeMeta { n, heads, blocks, l, r } = e.meta;
    // trace(e_i e_j^T) over (h, m) = frobenius inner product of slices
    let flat = e.values().reshape(&[n, heads * blocks, l * r])?;
    let mut out = Tensor::zeros(&[n, n]);
    let hm = heads * blocks;
    let lr = l * r;
    let scale = 1.0 / hm as f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..hm {
                for v in 0..lr {
                    acc += flat.at(&[i, k, v]) * flat.at(&[j, k, v]);
                }
            }
            out.set(&[i, j], acc * scale);
        }
    }
    Ok(out)
}

/// CSV rendering of the dot-product grid with position headers.
pub fn export_pe_dot_products(e: &PosTensor, positions: &[f64], tag: &str) -> Result<String> {
    let grid = pe_dot_product_grid(e)?;
    let n = e.meta.n;
    if positions.len() != n {
        return Err(Error::Contract {
            op: "export_pe_dot_products",
            details: format!("{} positions for n={n}", positions.len()),
        });
    }
    let mut out = String::new();
    out.push_str(&format!("# {tag}\n"));
    out.push_str("pos");
    for p in positions {
        out.push_str(&format!(",{p}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{}", positions[i]));
        for j in 0..n {
            out.push_str(&format!(",{:.12e}", grid.at(&[i, j])));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_orthogonal;

    fn rope_default(m: usize) -> RopeSchedule {
        RopeSchedule::new(m, 10_000.0, false).unwrap()
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let s = rope_default(4);
        let e = rope_init(&init_positions(0.0, 1), 2, &s).unwrap();
        for h in 0..2 {
            for m in 0..4 {
                assert!(e.slice(0, h, m).max_abs_diff(&Tensor::eye(2)).unwrap() < 1e-15);
            }
        }
    }

    #[test]
    fn rope_slices_are_orthonormal_and_shared_across_heads() {
        let s = rope_default(3);
        let e = rope_init(&init_positions(0.0, 6), 2, &s).unwrap();
        for i in 0..6 {
            for m in 0..3 {
                let sl = e.slice(i, 0, m);
                let g = sl.matmul_nt(&sl).unwrap();
                assert!(g.max_abs_diff(&Tensor::eye(2)).unwrap() <= 1e-12);
                assert_eq!(sl, e.slice(i, 1, m));
            }
        }
    }

    #[test]
    fn rope_gram_matches_direct_rotation_of_index_difference() {
        let s = rope_default(5);
        let e = rope_init(&init_positions(0.0, 9), 1, &s).unwrap();
        for (i, j) in [(3usize, 1usize), (0, 7), (8, 8), (2, 5)] {
            let g = gram(&e, i, j).unwrap();
            for m in 0..5 {
                let a = s.thetas[m] * (i as f64 - j as f64);
                let direct = Tensor::new(
                    vec![2, 2],
                    vec![a.cos(), -a.sin(), a.sin(), a.cos()],
                )
                .unwrap();
                let got = Tensor::from_fn(&[2, 2], |idx| g.at(&[0, m, idx[0], idx[1]]));
                assert!(got.max_abs_diff(&direct).unwrap() <= 1e-12, "i={i} j={j} m={m}");
            }
        }
    }

    #[test]
    fn rope_i3_j1_gram_is_rotation_by_two_theta() {
        let s = rope_default(2);
        let e = rope_init(&init_positions(0.0, 4), 1, &s).unwrap();
        let g = gram(&e, 3, 1).unwrap();
        for m in 0..2 {
            let a = 2.0 * s.thetas[m];
            assert!((g.at(&[0, m, 0, 0]) - a.cos()).abs() < 1e-12);
            assert!((g.at(&[0, m, 1, 0]) - a.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_zero_weights_give_zero_tensor() {
        let mut rng = Rng::new(5, 0);
        let mut s = FourierSchedule::sample(3, 2, 4, 1.0, &mut rng).unwrap();
        for m in &mut s.weights {
            for l in m {
                for w in l {
                    *w = 0.0;
                }
            }
        }
        let e = fourier_init(&init_positions(0.0, 4), 1, &s).unwrap();
        assert_eq!(e.values().max_abs(), 0.0);
    }

    #[test]
    fn fourier_single_zero_frequency_unit_weight() {
        // theta = 0, w = 1 -> rows are sqrt(2/R) * [1, 0, 1, 0, ...]
        let s = FourierSchedule {
            freqs: vec![vec![0.0, 0.0]],
            weights: vec![vec![vec![1.0, 1.0]]],
            r: 4,
        };
        let e = fourier_init(&init_positions(0.0, 3), 1, &s).unwrap();
        let scale = (2.0f64 / 4.0).sqrt();
        for i in 0..3 {
            let sl = e.slice(i, 0, 0);
            assert_eq!(sl.data(), &[scale, 0.0, scale, 0.0]);
        }
    }

    #[test]
    fn fourier_odd_r_rejected() {
        let mut rng = Rng::new(1, 1);
        assert!(FourierSchedule::sample(2, 2, 3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn phase_shift_zero_is_identity() {
        let s = Schedule::Rope(rope_default(3));
        let o = phase_shift(&s, 0.0).unwrap();
        for m in 0..3 {
            let om = Tensor::from_fn(&[2, 2], |i| o.at(&[m, i[0], i[1]]));
            assert!(om.max_abs_diff(&Tensor::eye(2)).unwrap() < 1e-15);
        }
    }

    #[test]
    fn phase_shift_matches_shifted_init() {
        // both families, several offsets, against re-initialization
        let mut rng = Rng::new(8, 2);
        let schedules = vec![
            Schedule::Rope(rope_default(4)),
            Schedule::Fourier(FourierSchedule::sample(3, 2, 6, 0.7, &mut rng).unwrap()),
        ];
        for sched in &schedules {
            for delta in [1.0, 7.0, 100.0] {
                let base = schedule_init(&init_positions(0.0, 8), 2, sched).unwrap();
                let shifted = schedule_init(&init_positions(delta, 8), 2, sched).unwrap();
                let o = phase_shift(sched, delta).unwrap();
                let rotated = base.rotate_per_block(&o).unwrap();
                let diff = rotated.values().max_abs_diff(shifted.values()).unwrap();
                assert!(diff <= 1e-10, "delta={delta} diff={diff}");

                // orthogonality of every block
                let m = o.shape()[0];
                let r = o.shape()[1];
                for mi in 0..m {
                    let om = Tensor::from_fn(&[r, r], |i| o.at(&[mi, i[0], i[1]]));
                    let ot = om.matmul_tn(&om).unwrap();
                    assert!(ot.max_abs_diff(&Tensor::eye(r)).unwrap() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn rope_phase_shift_delta_one_is_rotation_by_theta() {
        let s = rope_default(3);
        let o = phase_shift(&Schedule::Rope(s.clone()), 1.0).unwrap();
        for m in 0..3 {
            assert!((o.at(&[m, 0, 0]) - s.thetas[m].cos()).abs() < 1e-15);
            assert!((o.at(&[m, 1, 0]) - s.thetas[m].sin()).abs() < 1e-15);
            assert!((o.at(&[m, 0, 1]) + s.thetas[m].sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn gram_is_rotation_invariant() {
        let mut rng = Rng::new(13, 0);
        let s = FourierSchedule::sample(2, 3, 4, 1.0, &mut rng).unwrap();
        let e = fourier_init(&init_positions(0.0, 5), 2, &s).unwrap();
        for trial in 0..100 {
            let o = random_orthogonal(4, &mut rng).unwrap();
            let er = e.rotate(&o).unwrap();
            let g0 = gram(&e, 1, 3).unwrap();
            let g1 = gram(&er, 1, 3).unwrap();
            assert!(g0.max_abs_diff(&g1).unwrap() <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn gram_self_with_orthonormal_rows_is_identity_per_block() {
        let s = rope_default(3);
        let e = rope_init(&init_positions(0.0, 4), 1, &s).unwrap();
        let g = gram(&e, 2, 2).unwrap();
        for m in 0..3 {
            let got = Tensor::from_fn(&[2, 2], |idx| g.at(&[0, m, idx[0], idx[1]]));
            assert!(got.max_abs_diff(&Tensor::eye(2)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn dot_product_grid_is_toeplitz_for_rope() {
        let s = rope_default(4);
        let n = 7;
        let e = rope_init(&init_positions(0.0, n), 2, &s).unwrap();
        let grid = pe_dot_product_grid(&e).unwrap();
        for i in 0..n {
            for j in 0..n {
                if i + 1 < n && j + 1 < n {
                    assert!(
                        (grid.at(&[i, j]) - grid.at(&[i + 1, j + 1])).abs() <= 1e-10,
                        "not constant along diagonal at ({i},{j})"
                    );
                }
                // symmetric since trace(e_i e_j^T) = trace(e_j e_i^T)
                assert!((grid.at(&[i, j]) - grid.at(&[j, i])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn export_csv_single_position() {
        let s = rope_default(2);
        let e = rope_init(&init_positions(0.0, 1), 1, &s).unwrap();
        let csv = export_pe_dot_products(&e, &[0.0], "layer0").unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3); // tag, header, one row
        assert!(lines[1].starts_with("pos,"));
    }
}
