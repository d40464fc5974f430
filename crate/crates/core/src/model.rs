//! Transformer blocks with contextualized, equivariant positional encoding.
//!
//! A block updates token features X (attention + feed-forward, pre-norm,
//! residuals) and, when enabled, contextualizes the positional tensor E
//! through two rotation-equivariant paths: attention-weighted mixing of the
//! per-block embedding rows, and a token-conditioned linear map acting on
//! the non-rotation axes. Attention logits couple X and E only through the
//! per-block Gram matrices e_i e_j^T, which keeps them invariant under a
//! common rotation of the R axis.

use crate::autodiff::{GradTape, Var};
use crate::error::{Error, Result};
use crate::posenc::{
    init_positions, schedule_init, FourierSchedule, PeMeta, PosTensor, RopeSchedule, Schedule,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiMode {
    /// B = L and the Gram matrix enters the logits unchanged.
    Identity,
    /// A learned bilinear map from L x L Gram entries to B x B forms.
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeKind {
    Rope,
    Fourier,
}

/// Where the residual for the position-MLP update is taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EResidual {
    /// Residual from the attention-mixed encoding (the mixed rows replace E).
    Mixed,
    /// Residual from the block input E; zeroed updates leave E untouched.
    Input,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub n_ctx: usize,
    pub c: usize,
    pub heads: usize,
    pub blocks: usize,
    pub l: usize,
    pub r: usize,
    /// Intermediate dim of the position MLP; 0 means the default 4 * heads.
    pub i_dim: usize,
    pub depth: usize,
    pub phi: PhiMode,
    pub pe: PeKind,
    pub rope_base: f64,
    pub theta_negative: bool,
    pub fourier_freq_scale: f64,
    /// Attention-path position contextualization toggle.
    pub attn_ctx: bool,
    /// MLP-path position contextualization toggle.
    pub mlp_ctx: bool,
    pub e_residual: EResidual,
    /// Share the position-MLP weights across blocks and vectors (H x I)
    /// instead of the full (H*M*L) x I parameterization.
    pub shared_w: bool,
    pub w2_zero_init: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 16,
            n_ctx: 256,
            c: 256,
            heads: 4,
            blocks: 32,
            l: 2,
            r: 2,
            i_dim: 0,
            depth: 2,
            phi: PhiMode::Identity,
            pe: PeKind::Rope,
            rope_base: 10_000.0,
            theta_negative: false,
            fourier_freq_scale: 1.0,
            attn_ctx: true,
            mlp_ctx: true,
            e_residual: EResidual::Mixed,
            shared_w: true,
            w2_zero_init: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Channels per block: B = C / (H * M).
    pub fn b(&self) -> usize {
        self.c / (self.heads * self.blocks)
    }

    pub fn i_dim_effective(&self) -> usize {
        if self.i_dim == 0 {
            4 * self.heads
        } else {
            self.i_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |details: String| Err(Error::Config { details });
        if self.vocab == 0 || self.c == 0 || self.heads == 0 || self.blocks == 0 {
            return err("vocab, c, heads, blocks must be positive".into());
        }
        if self.c % (self.heads * self.blocks) != 0 {
            return err(format!(
                "c={} must be divisible by heads*blocks={}",
                self.c,
                self.heads * self.blocks
            ));
        }
        if self.phi == PhiMode::Identity && self.b() != self.l {
            return err(format!(
                "identity phi requires B == L, got B={} L={}",
                self.b(),
                self.l
            ));
        }
        if self.pe == PeKind::Rope && (self.l != 2 || self.r != 2) {
            return err(format!("rotary init requires L = R = 2, got L={} R={}", self.l, self.r));
        }
        if self.pe == PeKind::Fourier && self.r % 2 != 0 {
            return err(format!("fourier init requires even R, got {}", self.r));
        }
        Ok(())
    }

    pub fn pe_meta(&self, n: usize) -> Result<PeMeta> {
        PeMeta::new(n, self.heads, self.blocks, self.l, self.r)
    }

    /// The initialization schedule implied by the config (fourier frequencies
    /// are drawn from the given rng).
    pub fn schedule(&self, rng: &mut Rng) -> Result<Schedule> {
        match self.pe {
            PeKind::Rope => Ok(Schedule::Rope(RopeSchedule::new(
                self.blocks,
                self.rope_base,
                self.theta_negative,
            )?)),
            PeKind::Fourier => Ok(Schedule::Fourier(FourierSchedule::sample(
                self.blocks,
                self.l,
                self.r,
                self.fourier_freq_scale,
                rng,
            )?)),
        }
    }

    /// Parameters added per layer by position contextualization:
    /// the two mixing maps plus the affine psi head (and the bilinear phi
    /// form when enabled).
    pub fn added_params_per_layer(&self) -> usize {
        let i = self.i_dim_effective();
        let mixing = if self.shared_w {
            2 * self.heads * i
        } else {
            2 * self.heads * self.blocks * self.l * i
        };
        let psi = i * self.c + i;
        let phi = match self.phi {
            PhiMode::Identity => 0,
            PhiMode::Bilinear => self.b() * self.b() * self.l * self.l,
        };
        mixing + psi + phi
    }

    /// Per-layer parameter count without contextualization: attention
    /// projections, feed-forward, and the two norm gains.
    pub fn baseline_params_per_layer(&self) -> usize {
        4 * self.c * self.c + 8 * self.c * self.c + 2 * self.c
    }

    pub fn total_params(&self) -> usize {
        self.vocab * self.c
            + self.c
            + self.depth * (self.baseline_params_per_layer() + self.added_params_per_layer())
    }

    /// Canonical key=value rendering (sorted keys, one per line).
    pub fn to_kv(&self) -> String {
        let phi = match self.phi {
            PhiMode::Identity => "identity",
            PhiMode::Bilinear => "bilinear",
        };
        let pe = match self.pe {
            PeKind::Rope => "rope",
            PeKind::Fourier => "fourier",
        };
        let eres = match self.e_residual {
            EResidual::Mixed => "mixed",
            EResidual::Input => "input",
        };
        let mut lines = vec![
            format!("attn_ctx={}", self.attn_ctx),
            format!("blocks={}", self.blocks),
            format!("c={}", self.c),
            format!("depth={}", self.depth),
            format!("e_residual={eres}"),
            format!("fourier_freq_scale={}", self.fourier_freq_scale),
            format!("heads={}", self.heads),
            format!("i_dim={}", self.i_dim),
            format!("init_std={}", self.init_std),
            format!("l={}", self.l),
            format!("mlp_ctx={}", self.mlp_ctx),
            format!("n_ctx={}", self.n_ctx),
            format!("pe={pe}"),
            format!("phi={phi}"),
            format!("r={}", self.r),
            format!("rope_base={}", self.rope_base),
            format!("shared_w={}", self.shared_w),
            format!("theta_negative={}", self.theta_negative),
            format!("vocab={}", self.vocab),
            format!("w2_zero_init={}", self.w2_zero_init),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Parse the key=value form produced by `to_kv`; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    /// Apply key=value lines onto this config in place.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let cfg = self;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                details: format!("line {}: expected key=value, got '{line}'", lineno + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config {
                details: format!("line {}: bad {what} value '{value}'", lineno + 1),
            };
            match key {
                "attn_ctx" => cfg.attn_ctx = value.parse().map_err(|_| bad("bool"))?,
                "blocks" => cfg.blocks = value.parse().map_err(|_| bad("usize"))?,
                "c" => cfg.c = value.parse().map_err(|_| bad("usize"))?,
                "depth" => cfg.depth = value.parse().map_err(|_| bad("usize"))?,
                "e_residual" => {
                    cfg.e_residual = match value {
                        "mixed" => EResidual::Mixed,
                        "input" => EResidual::Input,
                        _ => return Err(bad("e_residual")),
                    }
                }
                "fourier_freq_scale" => {
                    cfg.fourier_freq_scale = value.parse().map_err(|_| bad("float"))?
                }
                "heads" => cfg.heads = value.parse().map_err(|_| bad("usize"))?,
                "i_dim" => cfg.i_dim = value.parse().map_err(|_| bad("usize"))?,
                "init_std" => cfg.init_std = value.parse().map_err(|_| bad("float"))?,
                "l" => cfg.l = value.parse().map_err(|_| bad("usize"))?,
                "mlp_ctx" => cfg.mlp_ctx = value.parse().map_err(|_| bad("bool"))?,
                "n_ctx" => cfg.n_ctx = value.parse().map_err(|_| bad("usize"))?,
                "pe" => {
                    cfg.pe = match value {
                        "rope" => PeKind::Rope,
                        "fourier" => PeKind::Fourier,
                        _ => return Err(bad("pe")),
                    }
                }
                "phi" => {
                    cfg.phi = match value {
                        "identity" => PhiMode::Identity,
                        "bilinear" => PhiMode::Bilinear,
                        _ => return Err(bad("phi")),
                    }
                }
                "r" => cfg.r = value.parse().map_err(|_| bad("usize"))?,
                "rope_base" => cfg.rope_base = value.parse().map_err(|_| bad("float"))?,
                "shared_w" => cfg.shared_w = value.parse().map_err(|_| bad("bool"))?,
                "theta_negative" => {
                    cfg.theta_negative = value.parse().map_err(|_| bad("bool"))?
                }
                "vocab" => cfg.vocab = value.parse().map_err(|_| bad("usize"))?,
                "w2_zero_init" => cfg.w2_zero_init = value.parse().map_err(|_| bad("bool"))?,
                _ => {
                    return Err(Error::Config {
                        details: format!("line {}: unknown key '{key}'", lineno + 1),
                    })
                }
            }
        }
        Ok(())
    }
}

/// Causal mask: row i allows keys j <= i.
pub fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |idx| if idx[1] <= idx[0] { 1.0 } else { 0.0 })
}

/// Every row of a {0,1} mask must have at least one allowed key.
pub fn validate_mask(mask: &Tensor) -> Result<()> {
    if mask.rank() != 2 || mask.shape()[0] != mask.shape()[1] {
        return Err(Error::InvalidShape {
            op: "validate_mask",
            shape: mask.shape().to_vec(),
            details: "mask must be square".into(),
        });
    }
    let n = mask.shape()[0];
    for i in 0..n {
        if (0..n).all(|j| mask.at(&[i, j]) == 0.0) {
            return Err(Error::Contract { op: "validate_mask", details: format!("row {i} empty") });
        }
    }
    Ok(())
}

/// All learnable weights of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_w2: Tensor,
    pub norm_attn: Tensor,
    pub norm_ffn: Tensor,
    /// Down-mixing map: [I, H] shared or [I, H*M*L] full.
    pub pos_w1: Tensor,
    /// Up-mixing map: [H, I] shared or [H*M*L, I] full; may be all zero.
    pub pos_w2: Tensor,
    pub psi_w: Tensor,
    pub psi_b: Tensor,
    /// Bilinear phi form [B, B*L*L]; empty for identity phi.
    pub phi_w: Option<Tensor>,
}

impl BlockParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let c = cfg.c;
        let std = cfg.init_std;
        let out_scale = 1.0 / (2.0 * cfg.depth.max(1) as f64).sqrt();
        let i = cfg.i_dim_effective();
        let mix_rows = if cfg.shared_w { cfg.heads } else { cfg.heads * cfg.blocks * cfg.l };
        let gauss = |rng: &mut Rng, shape: &[usize], s: f64| {
            let n: usize = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), rng.gauss_vec(n).iter().map(|v| v * s).collect())
        };
        let pos_w2 = if cfg.w2_zero_init {
            Tensor::zeros(&[mix_rows, i])
        } else {
            gauss(rng, &[mix_rows, i], std)
        };
        let phi_w = match cfg.phi {
            PhiMode::Identity => None,
            PhiMode::Bilinear => {
                Some(gauss(rng, &[cfg.b(), cfg.b() * cfg.l * cfg.l], std))
            }
        };
        BlockParams {
            w_q: gauss(rng, &[c, c], std),
            w_k: gauss(rng, &[c, c], std),
            w_v: gauss(rng, &[c, c], std),
            w_o: gauss(rng, &[c, c], std * out_scale),
            ffn_w1: gauss(rng, &[4 * c, c], std),
            ffn_w2: gauss(rng, &[c, 4 * c], std * out_scale),
            norm_attn: Tensor::filled(&[c], 1.0),
            norm_ffn: Tensor::filled(&[c], 1.0),
            pos_w1: gauss(rng, &[i, mix_rows], std),
            pos_w2,
            psi_w: gauss(rng, &[i, c], std),
            psi_b: Tensor::zeros(&[i]),
            phi_w,
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            (format!("{prefix}.w_q"), &self.w_q),
            (format!("{prefix}.w_k"), &self.w_k),
            (format!("{prefix}.w_v"), &self.w_v),
            (format!("{prefix}.w_o"), &self.w_o),
            (format!("{prefix}.ffn_w1"), &self.ffn_w1),
            (format!("{prefix}.ffn_w2"), &self.ffn_w2),
            (format!("{prefix}.norm_attn"), &self.norm_attn),
            (format!("{prefix}.norm_ffn"), &self.norm_ffn),
            (format!("{prefix}.pos_w1"), &self.pos_w1),
            (format!("{prefix}.pos_w2"), &self.pos_w2),
            (format!("{prefix}.psi_w"), &self.psi_w),
            (format!("{prefix}.psi_b"), &self.psi_b),
        ];
        if let Some(phi) = &self.phi_w {
            v.push((format!("{prefix}.phi_w"), phi));
        }
        v
    }
}

/// All weights of a model: tied embedding, per-layer blocks, final norm gain.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<BlockParams>,
    pub norm_final: Tensor,
    pub schedule: Schedule,
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let embed = {
            let n = config.vocab * config.c;
            Tensor::from_parts(
                vec![config.vocab, config.c],
                rng.gauss_vec(n).iter().map(|v| v * config.init_std).collect(),
            )
        };
        let layers = (0..config.depth).map(|_| BlockParams::init(&config, rng)).collect();
        let schedule = config.schedule(rng)?;
        Ok(ModelParams {
            norm_final: Tensor::filled(&[config.c], 1.0),
            embed,
            layers,
            config,
            schedule,
        })
    }

    /// Stable parameter naming used by checkpoints: `embed`, then
    /// `layer{i}.{w_q, w_k, w_v, w_o, ffn_w1, ffn_w2, norm_attn, norm_ffn,
    /// pos_w1, pos_w2, psi_w, psi_b[, phi_w]}`, then `norm_final`. The
    /// order matches `bind` / `BoundModel::all_vars`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("embed".to_string(), &self.embed)];
        for (i, layer) in self.layers.iter().enumerate() {
            v.extend(layer.named(&format!("layer{i}")));
        }
        v.push(("norm_final".to_string(), &self.norm_final));
        v
    }

    /// Mutable views in the same order as `named_tensors`.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = vec![&mut self.embed];
        for layer in &mut self.layers {
            v.push(&mut layer.w_q);
            v.push(&mut layer.w_k);
            v.push(&mut layer.w_v);
            v.push(&mut layer.w_o);
            v.push(&mut layer.ffn_w1);
            v.push(&mut layer.ffn_w2);
            v.push(&mut layer.norm_attn);
            v.push(&mut layer.norm_ffn);
            v.push(&mut layer.pos_w1);
            v.push(&mut layer.pos_w2);
            v.push(&mut layer.psi_w);
            v.push(&mut layer.psi_b);
            if let Some(phi) = &mut layer.phi_w {
                v.push(phi);
            }
        }
        v.push(&mut self.norm_final);
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Serialize into a named-tensor bundle whose header is the config in
    /// key=value form; sampled fourier schedules ride along as tensors.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bundle = crate::io::Bundle::new(self.config.to_kv());
        for (name, t) in self.named_tensors() {
            bundle.push(name, t.clone());
        }
        if let Schedule::Fourier(s) = &self.schedule {
            let m = s.blocks();
            let half = s.r / 2;
            let l = s.weights[0].len();
            bundle.push(
                "schedule.freqs",
                Tensor::from_fn(&[m, half], |i| s.freqs[i[0]][i[1]]),
            );
            bundle.push(
                "schedule.weights",
                Tensor::from_fn(&[m, l, half], |i| s.weights[i[0]][i[1]][i[2]]),
            );
        }
        bundle.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bundle = crate::io::Bundle::load(path)?;
        let config = ModelConfig::from_kv(&bundle.header)?;
        config.validate()?;
        let schedule = match config.pe {
            PeKind::Rope => Schedule::Rope(RopeSchedule::new(
                config.blocks,
                config.rope_base,
                config.theta_negative,
            )?),
            PeKind::Fourier => {
                let f = bundle.get("schedule.freqs")?;
                let w = bundle.get("schedule.weights")?;
                let (m, half) = (f.shape()[0], f.shape()[1]);
                let l = w.shape()[1];
                Schedule::Fourier(FourierSchedule {
                    freqs: (0..m).map(|a| (0..half).map(|b| f.at(&[a, b])).collect()).collect(),
                    weights: (0..m)
                        .map(|a| {
                            (0..l)
                                .map(|b| (0..half).map(|c| w.at(&[a, b, c])).collect())
                                .collect()
                        })
                        .collect(),
                    r: config.r,
                })
            }
        };
        let mut rng = Rng::new(0, 0);
        let mut params = ModelParams::init(config, &mut rng)?;
        params.schedule = schedule;
        let names: Vec<String> =
            params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.into_iter().zip(params.tensors_mut()) {
            let loaded = bundle.get(&name)?;
            if loaded.shape() != slot.shape() {
                return Err(Error::Format {
                    details: format!(
                        "checkpoint entry {name} has shape {:?}, expected {:?}",
                        loaded.shape(),
                        slot.shape()
                    ),
                });
            }
            *slot = loaded.clone();
        }
        Ok(params)
    }
}

/// Attention logits per (head, block): shape [H*M, N, N], tagged with the
/// tape node of the encoding they were computed from.
pub struct BlockLogits {
    pub var: Var,
    pub heads: usize,
    pub blocks: usize,
    pub n: usize,
    e_var: Var,
}

/// Block weights bound to tape variables.
pub struct BoundBlock {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
    pub norm_attn: Var,
    pub norm_ffn: Var,
    pub pos_w1: Var,
    pub pos_w2: Var,
    pub psi_w: Var,
    pub psi_b: Var,
    pub phi_w: Option<Var>,
}

impl BlockParams {
    pub fn bind(&self, tape: &mut GradTape, trainable: bool) -> BoundBlock {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        BoundBlock {
            w_q: put(&self.w_q),
            w_k: put(&self.w_k),
            w_v: put(&self.w_v),
            w_o: put(&self.w_o),
            ffn_w1: put(&self.ffn_w1),
            ffn_w2: put(&self.ffn_w2),
            norm_attn: put(&self.norm_attn),
            norm_ffn: put(&self.norm_ffn),
            pos_w1: put(&self.pos_w1),
            pos_w2: put(&self.pos_w2),
            psi_w: put(&self.psi_w),
            psi_b: put(&self.psi_b),
            phi_w: self.phi_w.as_ref().map(put),
        }
    }
}

pub struct BoundModel {
    pub embed: Var,
    pub layers: Vec<BoundBlock>,
    pub norm_final: Var,
}

impl BoundModel {
    /// All parameter vars in `ModelParams::named_tensors` order.
    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        for layer in &self.layers {
            v.push(layer.w_q);
            v.push(layer.w_k);
            v.push(layer.w_v);
            v.push(layer.w_o);
            v.push(layer.ffn_w1);
            v.push(layer.ffn_w2);
            v.push(layer.norm_attn);
            v.push(layer.norm_ffn);
            v.push(layer.pos_w1);
            v.push(layer.pos_w2);
            v.push(layer.psi_w);
            v.push(layer.psi_b);
            if let Some(phi) = layer.phi_w {
                v.push(phi);
            }
        }
        v.push(self.norm_final);
        v
    }
}

impl ModelParams {
    pub fn bind(&self, tape: &mut GradTape, trainable: bool) -> BoundModel {
        let embed = if trainable {
            tape.leaf(self.embed.clone())
        } else {
            tape.constant(self.embed.clone())
        };
        let layers = self.layers.iter().map(|l| l.bind(tape, trainable)).collect();
        let norm_final = if trainable {
            tape.leaf(self.norm_final.clone())
        } else {
            tape.constant(self.norm_final.clone())
        };
        BoundModel { embed, layers, norm_final }
    }
}

const NORM_EPS: f64 = 1e-12;

/// Root-mean-square norm over the last axis with a learned gain.
pub fn rms_norm(tape: &mut GradTape, x: Var, gain: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let last = tape.shape(x).len() - 1;
    let ms = tape.mean_axis(sq, last, true)?;
    let inv = tape.rsqrt_eps(ms, NORM_EPS);
    let xn = tape.mul(x, inv)?;
    tape.mul(xn, gain)
}

/// Pre-softmax attention logits per (i, j, head, block):
/// alpha[h,m,i,j] = (W_Q x_i)_m^T phi(e_{i,m} e_{j,m}^T) (W_K x_j)_m / sqrt(B).
///
/// The encoding enters only through per-block Gram matrices, so replacing E
/// by E*O for orthogonal O leaves the result unchanged.
pub fn block_logits(
    tape: &mut GradTape,
    x: Var,
    e: Var,
    meta: PeMeta,
    cfg: &ModelConfig,
    bp: &BoundBlock,
) -> Result<BlockLogits> {
    let (n, h, m, l, r) = (meta.n, meta.heads, meta.blocks, meta.l, meta.r);
    let b = cfg.b();
    if cfg.phi == PhiMode::Identity && b != l {
        return Err(Error::Config {
            details: format!("identity phi requires B == L, got B={b} L={l}"),
        });
    }
    let q = tape.linear(x, bp.w_q)?;
    let k = tape.linear(x, bp.w_k)?;
    // [N, C] -> [H*M, N, B]
    let split = |tape: &mut GradTape, t: Var| -> Result<Var> {
        let t = tape.reshape(t, &[n, h, m, b])?;
        let t = tape.permute(t, &[1, 2, 0, 3])?;
        tape.reshape(t, &[h * m, n, b])
    };
    let q = split(tape, q)?;
    let k = split(tape, k)?;
    // [N, H, M, L, R] -> [H*M, N, L, R]
    let e_perm = tape.permute(e, &[1, 2, 0, 3, 4])?;
    let scale = 1.0 / (b as f64).sqrt();

    let alpha = match cfg.phi {
        PhiMode::Identity => {
            // a[i] = e_i^T q_i, b[j] = e_j^T k_j; alpha = a . b^T per block
            let e_rows = tape.reshape(e_perm, &[h * m * n, l, r])?;
            let contract = |tape: &mut GradTape, t: Var| -> Result<Var> {
                let t = tape.reshape(t, &[h * m * n, 1, l])?;
                let t = tape.bmm(t, e_rows)?;
                tape.reshape(t, &[h * m, n, r])
            };
            let aq = contract(tape, q)?;
            let bk = contract(tape, k)?;
            tape.bmm_nt(aq, bk)?
        }
        PhiMode::Bilinear => {
            let phi_w = bp.phi_w.ok_or(Error::Config {
                details: "bilinear phi selected but no phi weights".into(),
            })?;
            // gram[hm, i, j, l, l'] then contracted with the bilinear form of (q_i, k_j)
            let e_flat = tape.reshape(e_perm, &[h * m, n * l, r])?;
            let gram = tape.bmm_nt(e_flat, e_flat)?; // [H*M, N*L, N*L]
            let gram = tape.reshape(gram, &[h * m, n, l, n, l])?;
            let gram = tape.permute(gram, &[0, 1, 3, 2, 4])?; // [H*M, N, N, L, L]
            let gram = tape.reshape(gram, &[h * m, n, n, l * l])?;
            // t1[i, b', ll'] = sum_b q[i, b] phi[b, b'*ll']
            let q2 = tape.reshape(q, &[h * m * n, b])?;
            let t1 = tape.matmul(q2, phi_w)?; // phi_w: [B, B*L*L]
            let t1 = tape.reshape(t1, &[h * m, n, b, l * l])?;
            let t1 = tape.permute(t1, &[0, 1, 3, 2])?; // [H*M, N, LL, B]
            let t1 = tape.reshape(t1, &[h * m, n * l * l, b])?;
            // c[i, ll', j] = sum_b' t1[i, ll', b'] k[j, b']
            let c = tape.bmm_nt(t1, k)?; // [H*M, N*LL, N]
            let c = tape.reshape(c, &[h * m, n, l * l, n])?;
            let c = tape.permute(c, &[0, 1, 3, 2])?; // [H*M, N, N, LL]
            let prod = tape.mul(c, gram)?;
            let summed = tape.sum_axis(prod, 3, false)?;
            tape.reshape(summed, &[h * m, n, n])?
        }
    };
    let var = tape.scale(alpha, scale);
    Ok(BlockLogits { var, heads: h, blocks: m, n, e_var: e })
}

/// Token mixing: per-head softmax over the block-summed logits, value mix,
/// output projection, residual. Returns the new X and the shared logits.
pub fn token_mix(
    tape: &mut GradTape,
    x: Var,
    e: Var,
    mask: &Tensor,
    meta: PeMeta,
    cfg: &ModelConfig,
    bp: &BoundBlock,
) -> Result<(Var, BlockLogits)> {
    let (n, h, m) = (meta.n, meta.heads, meta.blocks);
    let head_dim = cfg.c / h;
    let xn = rms_norm(tape, x, bp.norm_attn)?;
    let logits = block_logits(tape, xn, e, meta, cfg, bp)?;
    let per_head = tape.reshape(logits.var, &[h, m, n, n])?;
    let per_head = tape.sum_axis(per_head, 1, false)?; // [H, N, N]
    let attn = tape.masked_softmax(per_head, mask, false)?;
    let v = tape.linear(xn, bp.w_v)?;
    let v = tape.reshape(v, &[n, h, head_dim])?;
    let v = tape.permute(v, &[1, 0, 2])?; // [H, N, head_dim]
    let mixed = tape.bmm(attn, v)?;
    let mixed = tape.permute(mixed, &[1, 0, 2])?;
    let mixed = tape.reshape(mixed, &[n, cfg.c])?;
    let out = tape.linear(mixed, bp.w_o)?;
    let x_new = tape.add(x, out)?;
    Ok((x_new, logits))
}

/// Feed-forward sublayer on token features (pre-norm, GeLU, residual).
pub fn token_ffn(tape: &mut GradTape, x: Var, bp: &BoundBlock) -> Result<Var> {
    let xn = rms_norm(tape, x, bp.norm_ffn)?;
    let hidden = tape.linear(xn, bp.ffn_w1)?;
    let hidden = tape.gelu(hidden);
    let out = tape.linear(hidden, bp.ffn_w2)?;
    tape.add(x, out)
}

/// Attention-weighted mixing of the encoding rows: per (head, block) a
/// masked softmax of the shared logits combines the e_{j,m} slices, so each
/// output row is a convex combination of the unmasked input rows.
pub fn position_attend(
    tape: &mut GradTape,
    logits: &BlockLogits,
    e: Var,
    mask: &Tensor,
    meta: PeMeta,
) -> Result<Var> {
    if logits.e_var != e {
        return Err(Error::Contract {
            op: "position_attend",
            details: "logits were computed from a different encoding".into(),
        });
    }
    let (n, h, m, l, r) = (meta.n, meta.heads, meta.blocks, meta.l, meta.r);
    let attn = tape.masked_softmax(logits.var, mask, false)?; // [H*M, N, N]
    let e_perm = tape.permute(e, &[1, 2, 0, 3, 4])?;
    let e_rows = tape.reshape(e_perm, &[h * m, n, l * r])?;
    let mixed = tape.bmm(attn, e_rows)?;
    let mixed = tape.reshape(mixed, &[h, m, n, l, r])?;
    tape.permute(mixed, &[2, 0, 1, 3, 4])
}

/// Token-conditioned update of the encoding:
/// unflatten(W2 diag(psi(x)) W1^T flatten(e_mixed)) added onto `e_base`.
/// Both maps act on non-rotation axes only, so the update commutes with any
/// right-rotation of R.
pub fn position_mlp(
    tape: &mut GradTape,
    x_tilde: Var,
    e_mixed: Var,
    e_base: Var,
    meta: PeMeta,
    cfg: &ModelConfig,
    bp: &BoundBlock,
) -> Result<Var> {
    let (n, h, m, l, r) = (meta.n, meta.heads, meta.blocks, meta.l, meta.r);
    let i = cfg.i_dim_effective();
    let expect_rows = if cfg.shared_w { h } else { h * m * l };
    if tape.shape(bp.pos_w1) != [i, expect_rows] || tape.shape(bp.pos_w2) != [expect_rows, i] {
        return Err(Error::Config {
            details: format!(
                "position mixing weights expect {:?}/{:?}, got {:?}/{:?}",
                [i, expect_rows],
                [expect_rows, i],
                tape.shape(bp.pos_w1),
                tape.shape(bp.pos_w2)
            ),
        });
    }
    let psi = tape.linear(x_tilde, bp.psi_w)?;
    let psi = tape.add(psi, bp.psi_b)?;
    let psi = tape.reshape(psi, &[n, 1, i])?;

    let update = if cfg.shared_w {
        // rows of the flattened (H*M*L, R) view repeat per head, so the
        // down-projection sums the block/vector axes per head
        let esum = tape.reshape(e_mixed, &[n, h, m * l, r])?;
        let esum = tape.sum_axis(esum, 2, false)?; // [N, H, R]
        let ep = tape.permute(esum, &[0, 2, 1])?; // [N, R, H]
        let t = tape.linear(ep, bp.pos_w1)?; // [N, R, I]
        let t = tape.mul(t, psi)?;
        let up = tape.linear(t, bp.pos_w2)?; // [N, R, H]
        let up = tape.permute(up, &[0, 2, 1])?; // [N, H, R]
        tape.reshape(up, &[n, h, 1, 1, r])?
    } else {
        let flat = tape.reshape(e_mixed, &[n, h * m * l, r])?;
        let fp = tape.permute(flat, &[0, 2, 1])?; // [N, R, HML]
        let t = tape.linear(fp, bp.pos_w1)?;
        let t = tape.mul(t, psi)?;
        let up = tape.linear(t, bp.pos_w2)?; // [N, R, HML]
        let up = tape.permute(up, &[0, 2, 1])?;
        tape.reshape(up, &[n, h, m, l, r])?
    };
    tape.add(e_base, update)
}

/// One full layer: token mixing + feed-forward on X, and (optionally) the
/// two contextualization paths on E.
pub fn tape_block(
    tape: &mut GradTape,
    x: Var,
    e: Var,
    mask: &Tensor,
    meta: PeMeta,
    cfg: &ModelConfig,
    bp: &BoundBlock,
) -> Result<(Var, Var)> {
    let (x_mid, logits) = token_mix(tape, x, e, mask, meta, cfg, bp)?;
    let e_mixed = if cfg.attn_ctx { position_attend(tape, &logits, e, mask, meta)? } else { e };
    let e_new = if cfg.mlp_ctx {
        let base = match cfg.e_residual {
            EResidual::Mixed => e_mixed,
            EResidual::Input => e,
        };
        position_mlp(tape, x_mid, e_mixed, base, meta, cfg, bp)?
    } else {
        match cfg.e_residual {
            EResidual::Mixed => e_mixed,
            EResidual::Input => e,
        }
    };
    let x_new = token_ffn(tape, x_mid, bp)?;
    Ok((x_new, e_new))
}

/// Full forward pass over token ids: embedding, `depth` blocks threading a
/// single encoding, final norm, tied output head. Returns the logits var
/// and the per-layer encoding vars (input encoding first).
pub fn model_forward(
    tape: &mut GradTape,
    params: &ModelParams,
    bound: &BoundModel,
    tokens: &[usize],
    position_offset: f64,
) -> Result<(Var, Vec<Var>)> {
    let cfg = &params.config;
    let n = tokens.len();
    if n == 0 || n > cfg.n_ctx {
        return Err(Error::Config {
            details: format!("sequence length {n} outside 1..={}", cfg.n_ctx),
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Config { details: format!("token id {bad} >= vocab {}", cfg.vocab) });
    }
    let meta = cfg.pe_meta(n)?;
    let mask = causal_mask(n);
    let positions = init_positions(position_offset, n);
    let e0 = schedule_init(&positions, cfg.heads, &params.schedule)?;
    let mut e = tape.constant(e0.into_values());
    let mut x = tape.gather_rows(bound.embed, tokens)?;
    let mut e_trace = vec![e];
    for bp in &bound.layers {
        let (x2, e2) = tape_block(tape, x, e, &mask, meta, cfg, bp)?;
        x = x2;
        e = e2;
        e_trace.push(e);
    }
    let xf = rms_norm(tape, x, bound.norm_final)?;
    let logits = tape.linear(xf, bound.embed)?;
    Ok((logits, e_trace))
}

/// Forward-only evaluation returning plain tensors: (logits, per-layer E).
pub fn forward_tokens(
    params: &ModelParams,
    tokens: &[usize],
    position_offset: f64,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = GradTape::new();
    let bound = params.bind(&mut tape, false);
    let (logits, e_trace) = model_forward(&mut tape, params, &bound, tokens, position_offset)?;
    let out = tape.value(logits).clone();
    let es = e_trace.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((out, es))
}

/// Classical rotary attention logits, built directly from the rotation of
/// the index difference: per head,
/// logit[h,i,j] = sum_m (W_Q x_i)_{h,m}^T R(theta_m (p_i - p_j)) (W_K x_j)_{h,m} / sqrt(B).
///
/// This is the independent oracle for the special-case equivalence with
/// `block_logits` under rotary initialization; it never forms Gram matrices.
pub fn rope_attention_baseline(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    schedule: &RopeSchedule,
    heads: usize,
    positions: &[f64],
) -> Result<Tensor> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let m = schedule.blocks();
    if positions.len() != n || c % (heads * m) != 0 || c / (heads * m) != 2 {
        return Err(Error::Config {
            details: format!(
                "rope baseline requires B=2: c={c}, heads={heads}, blocks={m}, n={n}"
            ),
        });
    }
    let q = x.matmul_nt(w_q)?;
    let k = x.matmul_nt(w_k)?;
    let scale = 1.0 / (2.0f64).sqrt();
    let mut out = Tensor::zeros(&[heads, n, n]);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for mi in 0..m {
                    let base = (h * m + mi) * 2;
                    let (q0, q1) = (q.at(&[i, base]), q.at(&[i, base + 1]));
                    let (k0, k1) = (k.at(&[j, base]), k.at(&[j, base + 1]));
                    let a = schedule.thetas[mi] * (positions[i] - positions[j]);
                    let (ca, sa) = (a.cos(), a.sin());
                    // q^T R(a) k with R = [[c, -s], [s, c]]
                    acc += q0 * (ca * k0 - sa * k1) + q1 * (sa * k0 + ca * k1);
                }
                out.set(&[h, i, j], acc * scale);
            }
        }
    }
    Ok(out)
}

/// Forward-only block evaluation on plain tensors (constants on a scratch
/// tape); used by the symmetry harnesses.
pub fn run_block(
    cfg: &ModelConfig,
    bp: &BlockParams,
    x: &Tensor,
    e: &PosTensor,
    mask: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = GradTape::new();
    let bound = bp.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let ev = tape.constant(e.values().clone());
    let (x2, e2) = tape_block(&mut tape, xv, ev, mask, e.meta, cfg, &bound)?;
    Ok((tape.value(x2).clone(), tape.value(e2).clone()))
}

/// Forward-only logits evaluation on plain tensors.
pub fn run_block_logits(
    cfg: &ModelConfig,
    bp: &BlockParams,
    x: &Tensor,
    e: &PosTensor,
) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let bound = bp.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let ev = tape.constant(e.values().clone());
    let logits = block_logits(&mut tape, xv, ev, e.meta, cfg, &bound)?;
    Ok(tape.value(logits.var).clone())
}
