//! Symmetry test harness.
//!
//! A layer under test is any callable on plain tensors (X [N, C],
//! E [N, ..., R], M [N, N]). The harness samples random inputs, random
//! permutations acting on the token axis, and random rotations acting on
//! the trailing R axis, and measures the worst deviation from the expected
//! transformation law. Deliberately broken layer variants are provided so
//! the checks themselves can be shown non-vacuous.

use serde::Serialize;

use crate::autodiff::GradTape;
use crate::error::{Error, Result};
use crate::linalg::{apply_last_axis, random_orthogonal, Permutation};
use crate::model::{
    position_attend, run_block, token_ffn, token_mix, BlockParams, ModelConfig, ModelParams,
};
use crate::posenc::{pe_dot_product_grid, PeMeta, PosTensor};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// How the layer output must transform under a token permutation P and an
/// R-axis rotation O applied to the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OutputLaw {
    /// out(PX, PEO, PMP^T) = P out(X, E, M); rotation leaves it unchanged.
    PermuteInvariant,
    /// out(PX, PEO, PMP^T) = P out(X, E, M) O; rotation acts on the last axis.
    PermuteEquivariant,
}

/// Mask families used when sampling trials.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MaskKind {
    /// Causal rows plus random extra ones, then a random row/col conjugation;
    /// every row keeps at least one allowed key.
    CausalPermSprinkle,
    /// Plain lower-triangular (j <= i).
    LowerTriangular,
}

/// Input dimensions for a harness run.
#[derive(Clone, Debug, Serialize)]
pub struct HarnessSpec {
    pub n: usize,
    pub c: usize,
    /// Full E shape; first dim must equal n, last dim is the rotation axis.
    pub e_shape: Vec<usize>,
    pub mask: MaskKind,
}

impl HarnessSpec {
    pub fn r(&self) -> usize {
        *self.e_shape.last().expect("e_shape nonempty")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub trial: u64,
    pub deviation: f64,
}

/// Outcome of one symmetry suite: per-trial deviations, the threshold, and
/// the seed that reproduces everything.
#[derive(Clone, Debug, Serialize)]
pub struct EquivarianceReport {
    pub name: String,
    pub law: OutputLaw,
    pub tol: f64,
    pub seed: u64,
    pub trials: Vec<TrialResult>,
    pub max_deviation: f64,
    pub pass: bool,
    /// Stream id reproducing the first failing trial, if any.
    pub failing_trial: Option<u64>,
}

impl EquivarianceReport {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn sample_mask(kind: MaskKind, n: usize, rng: &mut Rng) -> Tensor {
    match kind {
        MaskKind::LowerTriangular => crate::model::causal_mask(n),
        MaskKind::CausalPermSprinkle => {
            let mut m = crate::model::causal_mask(n);
            for i in 0..n {
                for j in 0..n {
                    if rng.uniform() < 0.15 {
                        m.set(&[i, j], 1.0);
                    }
                }
            }
            let p = Permutation::random(n, rng);
            conjugate_mask(&m, &p)
        }
    }
}

/// P M P^T in index form: out[i, j] = m[p(i), p(j)].
fn conjugate_mask(m: &Tensor, p: &Permutation) -> Tensor {
    let n = p.len();
    Tensor::from_fn(&[n, n], |idx| m.at(&[p.apply(idx[0]), p.apply(idx[1])]))
}

/// Run a permutation/rotation equivariance suite on `layer`.
///
/// Per trial the harness draws (X, E, M, P, O), evaluates the layer on both
/// the raw and the transformed inputs, and records the max-abs deviation
/// from the expected law. Deterministic given `seed`; trial t uses rng
/// stream t.
pub fn check_perm_equivariance<F>(
    name: &str,
    layer: F,
    law: OutputLaw,
    spec: &HarnessSpec,
    trials: u64,
    tol: f64,
    seed: u64,
) -> Result<EquivarianceReport>
where
    F: Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    let mut results = Vec::with_capacity(trials as usize);
    for t in 0..trials {
        let mut rng = Rng::new(seed, t);
        let x = Tensor::from_parts(vec![spec.n, spec.c], rng.gauss_vec(spec.n * spec.c));
        let e_len: usize = spec.e_shape.iter().product();
        let e = Tensor::from_parts(spec.e_shape.clone(), rng.gauss_vec(e_len));
        let mask = sample_mask(spec.mask, spec.n, &mut rng);
        let p = Permutation::random(spec.n, &mut rng);
        let o = random_orthogonal(spec.r(), &mut rng)?;

        let base = layer(&x, &e, &mask)?;
        let px = p.permute_rows(&x)?;
        let pe = apply_last_axis(&p.permute_rows(&e)?, &o)?;
        let pm = conjugate_mask(&mask, &p);
        let transformed = layer(&px, &pe, &pm)?;
        let expected = match law {
            OutputLaw::PermuteInvariant => p.permute_rows(&base)?,
            OutputLaw::PermuteEquivariant => apply_last_axis(&p.permute_rows(&base)?, &o)?,
        };
        let deviation = transformed.max_abs_diff(&expected)?;
        results.push(TrialResult { trial: t, deviation });
    }
    Ok(build_report(name, law, tol, seed, results))
}

/// Pure-rotation checks: with `PermuteInvariant` the output must not change
/// under E -> E O; with `PermuteEquivariant` it must pick up the same O on
/// its last axis.
pub fn check_ortho_equivariance<F>(
    name: &str,
    layer: F,
    law: OutputLaw,
    spec: &HarnessSpec,
    trials: u64,
    tol: f64,
    seed: u64,
) -> Result<EquivarianceReport>
where
    F: Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    let mut results = Vec::with_capacity(trials as usize);
    for t in 0..trials {
        let mut rng = Rng::new(seed, t);
        let x = Tensor::from_parts(vec![spec.n, spec.c], rng.gauss_vec(spec.n * spec.c));
        let e_len: usize = spec.e_shape.iter().product();
        let e = Tensor::from_parts(spec.e_shape.clone(), rng.gauss_vec(e_len));
        let mask = sample_mask(spec.mask, spec.n, &mut rng);
        let o = random_orthogonal(spec.r(), &mut rng)?;

        let base = layer(&x, &e, &mask)?;
        let rotated_in = apply_last_axis(&e, &o)?;
        let rotated_out = layer(&x, &rotated_in, &mask)?;
        let expected = match law {
            OutputLaw::PermuteInvariant => base,
            OutputLaw::PermuteEquivariant => apply_last_axis(&base, &o)?,
        };
        let deviation = rotated_out.max_abs_diff(&expected)?;
        results.push(TrialResult { trial: t, deviation });
    }
    Ok(build_report(name, law, tol, seed, results))
}

fn build_report(
    name: &str,
    law: OutputLaw,
    tol: f64,
    seed: u64,
    trials: Vec<TrialResult>,
) -> EquivarianceReport {
    let max_deviation = trials.iter().fold(0.0f64, |acc, t| acc.max(t.deviation));
    let failing_trial = trials.iter().find(|t| t.deviation > tol).map(|t| t.trial);
    EquivarianceReport {
        name: name.to_string(),
        law,
        tol,
        seed,
        max_deviation,
        pass: failing_trial.is_none(),
        failing_trial,
        trials,
    }
}

// ── layer adapters ──────────────────────────────────────────────────

fn meta_from_e(e: &Tensor) -> Result<PeMeta> {
    if e.rank() != 5 {
        return Err(Error::InvalidShape {
            op: "meta_from_e",
            shape: e.shape().to_vec(),
            details: "expected a 5-axis encoding".into(),
        });
    }
    PeMeta::new(e.shape()[0], e.shape()[1], e.shape()[2], e.shape()[3], e.shape()[4])
}

/// The token-feature map of a full block as a harness callable.
pub fn block_f<'a>(
    cfg: &'a ModelConfig,
    bp: &'a BlockParams,
) -> impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a {
    move |x, e, mask| {
        let meta = meta_from_e(e)?;
        let pe = PosTensor::new(meta, e.clone())?;
        run_block(cfg, bp, x, &pe, mask).map(|(xo, _)| xo)
    }
}

/// The encoding map of a full block as a harness callable.
pub fn block_g<'a>(
    cfg: &'a ModelConfig,
    bp: &'a BlockParams,
) -> impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a {
    move |x, e, mask| {
        let meta = meta_from_e(e)?;
        let pe = PosTensor::new(meta, e.clone())?;
        run_block(cfg, bp, x, &pe, mask).map(|(_, eo)| eo)
    }
}

/// The pre-softmax logits as a harness callable (rotation-invariance only;
/// the output axes are (head*block, i, j), not token-major).
pub fn block_logits_fn<'a>(
    cfg: &'a ModelConfig,
    bp: &'a BlockParams,
) -> impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a {
    move |x, e, _mask| {
        let meta = meta_from_e(e)?;
        let pe = PosTensor::new(meta, e.clone())?;
        crate::model::run_block_logits(cfg, bp, x, &pe)
    }
}

// ── deliberately broken variants ────────────────────────────────────

/// Token mixer that folds the flattened encoding into the token features
/// through a fixed projection before attending. Any rotation of E then
/// leaks into the feature path, so the joint permutation/rotation law
/// fails.
pub fn broken_flatten_pe_f<'a>(
    cfg: &'a ModelConfig,
    bp: &'a BlockParams,
    fold: &'a Tensor,
) -> impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a {
    move |x, e, mask| {
        let meta = meta_from_e(e)?;
        let n = meta.n;
        let flat = e.reshape(&[n, meta.heads * meta.d()])?;
        let folded = x.add(&flat.matmul_nt(fold)?)?;
        let pe = PosTensor::new(meta, e.clone())?;
        run_block(cfg, bp, &folded, &pe, mask).map(|(xo, _)| xo)
    }
}

/// Position MLP whose mixing maps act jointly on the (head, rotation) axes
/// (weights of shape [H*R, I]); linearly mixing rotation coordinates with
/// fixed weights destroys O(R)-equivariance while keeping the update
/// per-token.
pub fn broken_r_mixing_g<'a>(
    cfg: &'a ModelConfig,
    bp: &'a BlockParams,
    w1: &'a Tensor,
    w2: &'a Tensor,
) -> impl Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor> + 'a {
    move |x, e, mask| {
        let meta = meta_from_e(e)?;
        let (n, h, m, l, r) = (meta.n, meta.heads, meta.blocks, meta.l, meta.r);
        let i = cfg.i_dim_effective();
        let mut tape = GradTape::new();
        let bound = bp.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let ev = tape.constant(e.clone());
        let (x_mid, logits) = token_mix(&mut tape, xv, ev, mask, meta, cfg, &bound)?;
        let e_mixed =
            if cfg.attn_ctx { position_attend(&mut tape, &logits, ev, mask, meta)? } else { ev };
        // mix the (H, R) axes jointly
        let w1v = tape.constant(w1.clone()); // [I, H*R]
        let w2v = tape.constant(w2.clone()); // [H*R, I]
        let psi = tape.linear(x_mid, bound.psi_w)?;
        let psi = tape.add(psi, bound.psi_b)?;
        let psi = tape.reshape(psi, &[n, 1, i])?;
        let eg = tape.reshape(e_mixed, &[n, h, m * l, r])?;
        let eg = tape.permute(eg, &[0, 2, 1, 3])?; // [N, ML, H, R]
        let eg = tape.reshape(eg, &[n, m * l, h * r])?;
        let t = tape.linear(eg, w1v)?; // [N, ML, I]
        let t = tape.mul(t, psi)?;
        let up = tape.linear(t, w2v)?; // [N, ML, H*R]
        let up = tape.reshape(up, &[n, m * l, h, r])?;
        let up = tape.permute(up, &[0, 2, 1, 3])?;
        let up = tape.reshape(up, &[n, h, m, l, r])?;
        let out = tape.add(e_mixed, up)?;
        let _ = token_ffn(&mut tape, x_mid, &bound)?;
        Ok(tape.value(out).clone())
    }
}

// ── identity layers (harness sanity) ───────────────────────────────

pub fn identity_f(x: &Tensor, _e: &Tensor, _m: &Tensor) -> Result<Tensor> {
    Ok(x.clone())
}

pub fn identity_g(_x: &Tensor, e: &Tensor, _m: &Tensor) -> Result<Tensor> {
    Ok(e.clone())
}

// ── shift invariance ────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct ShiftEntry {
    pub delta: f64,
    pub max_logit_dev: f64,
    pub per_layer_grid_dev: Vec<f64>,
}

/// Shift-invariance report: index shifts must leave the logits unchanged
/// (up to `tol`); prepending extra BOS tokens is reported but not asserted.
#[derive(Clone, Debug, Serialize)]
pub struct ShiftReport {
    pub seed: u64,
    pub n: usize,
    pub tol: f64,
    pub id_shift: Vec<ShiftEntry>,
    pub bos_prepend: ShiftEntry,
    pub pass: bool,
}

impl ShiftReport {
    pub fn to_jsonl(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn grid_of(meta: PeMeta, values: &Tensor) -> Result<Tensor> {
    pe_dot_product_grid(&PosTensor::new(meta, values.clone())?)
}

/// Run both shift protocols on a model.
///
/// ID shift: initialize positions at `delta` instead of 0 and compare
/// logits and per-layer encoding dot-product grids. BOS prepend: add
/// `bos_count` copies of `bos_token` in front and compare the suffix.
pub fn check_shift_invariance(
    params: &ModelParams,
    tokens: &[usize],
    deltas: &[f64],
    bos_token: usize,
    bos_count: usize,
    tol: f64,
    seed: u64,
) -> Result<ShiftReport> {
    let n = tokens.len();
    let meta = params.config.pe_meta(n)?;
    let (base_logits, base_es) = crate::model::forward_tokens(params, tokens, 0.0)?;
    let base_grids: Vec<Tensor> =
        base_es.iter().map(|e| grid_of(meta, e)).collect::<Result<_>>()?;

    let mut id_shift = Vec::new();
    for &delta in deltas {
        let (logits, es) = crate::model::forward_tokens(params, tokens, delta)?;
        let max_logit_dev = logits.max_abs_diff(&base_logits)?;
        let mut per_layer = Vec::new();
        for (e, bg) in es.iter().zip(&base_grids) {
            per_layer.push(grid_of(meta, e)?.max_abs_diff(bg)?);
        }
        id_shift.push(ShiftEntry { delta, max_logit_dev, per_layer_grid_dev: per_layer });
    }

    // prepend protocol: compare the logits at the original token positions
    let mut prefixed = vec![bos_token; bos_count];
    prefixed.extend_from_slice(tokens);
    let (pref_logits, pref_es) = crate::model::forward_tokens(params, &prefixed, 0.0)?;
    let mut max_logit_dev = 0.0f64;
    for i in 0..n {
        for v in 0..params.config.vocab {
            max_logit_dev = max_logit_dev
                .max((pref_logits.at(&[bos_count + i, v]) - base_logits.at(&[i, v])).abs());
        }
    }
    let pref_meta = params.config.pe_meta(n + bos_count)?;
    let mut per_layer = Vec::new();
    for (e, bg) in pref_es.iter().zip(&base_grids) {
        let full = grid_of(pref_meta, e)?;
        let sub = Tensor::from_fn(&[n, n], |idx| {
            full.at(&[idx[0] + bos_count, idx[1] + bos_count])
        });
        per_layer.push(sub.max_abs_diff(bg)?);
    }
    let bos_prepend =
        ShiftEntry { delta: bos_count as f64, max_logit_dev, per_layer_grid_dev: per_layer };

    let pass = id_shift.iter().all(|e| e.max_logit_dev <= tol);
    Ok(ShiftReport { seed, n, tol, id_shift, bos_prepend, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EResidual, PeKind};

    fn harness_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 11,
            n_ctx: 64,
            c: 16,
            heads: 2,
            blocks: 4,
            l: 2,
            r: 2,
            depth: 1,
            ..ModelConfig::default()
        }
    }

    fn spec_for(cfg: &ModelConfig, n: usize) -> HarnessSpec {
        HarnessSpec {
            n,
            c: cfg.c,
            e_shape: vec![n, cfg.heads, cfg.blocks, cfg.l, cfg.r],
            mask: MaskKind::CausalPermSprinkle,
        }
    }

    #[test]
    fn identity_layers_have_zero_deviation() {
        let cfg = harness_cfg();
        let spec = spec_for(&cfg, 6);
        let rep = check_perm_equivariance(
            "identity_f",
            identity_f,
            OutputLaw::PermuteInvariant,
            &spec,
            5,
            1e-12,
            7,
        )
        .unwrap();
        assert!(rep.pass);
        assert_eq!(rep.max_deviation, 0.0);

        let rep = check_perm_equivariance(
            "identity_g",
            identity_g,
            OutputLaw::PermuteEquivariant,
            &spec,
            5,
            1e-10,
            7,
        )
        .unwrap();
        assert!(rep.pass, "max {}", rep.max_deviation);
    }

    #[test]
    fn tape_block_satisfies_both_laws() {
        let cfg = harness_cfg();
        let mut rng = Rng::new(42, 0);
        let bp = BlockParams::init(&cfg, &mut rng);
        let spec = spec_for(&cfg, 7);

        let rep = check_perm_equivariance(
            "tape_f_perm",
            block_f(&cfg, &bp),
            OutputLaw::PermuteInvariant,
            &spec,
            10,
            1e-8,
            11,
        )
        .unwrap();
        assert!(rep.pass, "f perm max {}", rep.max_deviation);

        let rep = check_perm_equivariance(
            "tape_g_perm",
            block_g(&cfg, &bp),
            OutputLaw::PermuteEquivariant,
            &spec,
            10,
            1e-8,
            12,
        )
        .unwrap();
        assert!(rep.pass, "g perm max {}", rep.max_deviation);

        let rep = check_ortho_equivariance(
            "tape_f_ortho",
            block_f(&cfg, &bp),
            OutputLaw::PermuteInvariant,
            &spec,
            10,
            1e-8,
            13,
        )
        .unwrap();
        assert!(rep.pass, "f ortho max {}", rep.max_deviation);

        let rep = check_ortho_equivariance(
            "tape_g_ortho",
            block_g(&cfg, &bp),
            OutputLaw::PermuteEquivariant,
            &spec,
            10,
            1e-8,
            14,
        )
        .unwrap();
        assert!(rep.pass, "g ortho max {}", rep.max_deviation);

        let rep = check_ortho_equivariance(
            "logits_invariant",
            block_logits_fn(&cfg, &bp),
            OutputLaw::PermuteInvariant,
            &spec,
            10,
            1e-10,
            15,
        )
        .unwrap();
        assert!(rep.pass, "logits max {}", rep.max_deviation);
    }

    #[test]
    fn input_residual_variant_also_equivariant() {
        let mut cfg = harness_cfg();
        cfg.e_residual = EResidual::Input;
        let mut rng = Rng::new(43, 0);
        let bp = BlockParams::init(&cfg, &mut rng);
        let spec = spec_for(&cfg, 6);
        let rep = check_perm_equivariance(
            "tape_g_perm_input_residual",
            block_g(&cfg, &bp),
            OutputLaw::PermuteEquivariant,
            &spec,
            6,
            1e-8,
            20,
        )
        .unwrap();
        assert!(rep.pass, "max {}", rep.max_deviation);
    }

    #[test]
    fn flattened_pe_mutation_fails_perm_check() {
        let cfg = harness_cfg();
        let mut rng = Rng::new(44, 0);
        let bp = BlockParams::init(&cfg, &mut rng);
        let d = cfg.heads * cfg.blocks * cfg.l * cfg.r;
        let fold = Tensor::from_parts(vec![cfg.c, d], rng.gauss_vec(cfg.c * d));
        let spec = spec_for(&cfg, 6);
        let rep = check_perm_equivariance(
            "broken_flatten_pe",
            broken_flatten_pe_f(&cfg, &bp, &fold),
            OutputLaw::PermuteInvariant,
            &spec,
            5,
            1e-8,
            21,
        )
        .unwrap();
        assert!(!rep.pass, "mutation must be detected");
        assert!(rep.max_deviation > 1e-4, "max {}", rep.max_deviation);
        assert!(rep.failing_trial.is_some());
    }

    #[test]
    fn r_mixing_mutation_fails_ortho_check() {
        let cfg = harness_cfg();
        let mut rng = Rng::new(45, 0);
        let bp = BlockParams::init(&cfg, &mut rng);
        let i = cfg.i_dim_effective();
        let hr = cfg.heads * cfg.r;
        let w1 = Tensor::from_parts(vec![i, hr], rng.gauss_vec(i * hr));
        let w2 = Tensor::from_parts(vec![hr, i], rng.gauss_vec(hr * i));
        let spec = spec_for(&cfg, 6);

        let rep = check_ortho_equivariance(
            "broken_r_mixing_ortho",
            broken_r_mixing_g(&cfg, &bp, &w1, &w2),
            OutputLaw::PermuteEquivariant,
            &spec,
            5,
            1e-8,
            22,
        )
        .unwrap();
        assert!(!rep.pass, "rotation mixing must break the ortho law");
        assert!(rep.max_deviation > 1e-6, "max {}", rep.max_deviation);

    }

    #[test]
    fn reports_are_deterministic_and_serializable() {
        let cfg = harness_cfg();
        let mut rng = Rng::new(46, 0);
        let bp = BlockParams::init(&cfg, &mut rng);
        let spec = spec_for(&cfg, 5);
        let a = check_perm_equivariance(
            "repro",
            block_f(&cfg, &bp),
            OutputLaw::PermuteInvariant,
            &spec,
            4,
            1e-8,
            99,
        )
        .unwrap();
        let b = check_perm_equivariance(
            "repro",
            block_f(&cfg, &bp),
            OutputLaw::PermuteInvariant,
            &spec,
            4,
            1e-8,
            99,
        )
        .unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert!(a.to_jsonl().contains("\"max_deviation\""));
    }

    #[test]
    fn shift_invariance_on_small_models() {
        for pe in [PeKind::Rope, PeKind::Fourier] {
            let cfg = ModelConfig {
                vocab: 11,
                n_ctx: 64,
                c: 16,
                heads: 2,
                blocks: 4,
                l: 2,
                r: if pe == PeKind::Fourier { 2 } else { 2 },
                depth: 2,
                pe,
                ..ModelConfig::default()
            };
            let mut rng = Rng::new(47, 0);
            let params = ModelParams::init(cfg, &mut rng).unwrap();
            let tokens: Vec<usize> = (0..8).map(|_| rng.below(11)).collect();
            let report =
                check_shift_invariance(&params, &tokens, &[0.0, 3.0, 17.0], 1, 3, 1e-8, 47)
                    .unwrap();
            assert!(report.pass, "pe={pe:?} report {:?}", report.id_shift);
            assert_eq!(report.id_shift[0].max_logit_dev, 0.0, "delta=0 must be exact");
            // prepending tokens genuinely changes the suffix logits
            assert!(report.bos_prepend.max_logit_dev > 1e-8, "pe={pe:?}");
        }
    }
}
