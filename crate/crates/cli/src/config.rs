//! Flat key=value run configuration.
//!
//! Every key has a default; unknown keys are errors. Keys are grouped by
//! dotted prefixes (`model.`, `train.`, `eval.`, `props.`, `shift.`,
//! `nc1.`, `dump.`) plus the top-level `seed`, `out`, and `jobs`. Paths are
//! resolved relative to the directory containing the config file.

use std::path::{Path, PathBuf};

use tape_core::error::{Error, Result};
use tape_core::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub start_step: usize,
    pub warmup_steps: usize,
    pub schedule_total_steps: usize,
    pub lr_final: f64,
    pub max_len: usize,
    pub dataset_size: usize,
    pub msd_first: bool,
    pub log_every: usize,
    pub dataset_cache: String,
    pub resume_from: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            batch: 32,
            steps: 1000,
            start_step: 0,
            warmup_steps: 0,
            schedule_total_steps: 0,
            lr_final: 0.0,
            max_len: 10,
            dataset_size: 20_000,
            msd_first: false,
            log_every: 10,
            dataset_cache: String::new(),
            resume_from: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub checkpoint: String,
    pub rope_checkpoint: String,
    pub max_eval_len: usize,
    pub samples_per_cell: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoint: "checkpoint.tapb".into(),
            rope_checkpoint: String::new(),
            max_eval_len: 15,
            samples_per_cell: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropsSection {
    pub trials: u64,
    pub n: usize,
    pub tol: f64,
}

impl Default for PropsSection {
    fn default() -> Self {
        PropsSection { trials: 50, n: 8, tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSection {
    pub deltas: Vec<f64>,
    pub bos_count: usize,
    pub tol: f64,
    pub n: usize,
}

impl Default for ShiftSection {
    fn default() -> Self {
        ShiftSection { deltas: vec![1.0, 3.0, 17.0, 100.0], bos_count: 3, tol: 1e-8, n: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nc1Section {
    pub max_n: usize,
    pub instances: usize,
    pub sweep: Vec<usize>,
}

impl Default for Nc1Section {
    fn default() -> Self {
        Nc1Section { max_n: 128, instances: 1000, sweep: vec![8, 16, 32, 64, 128, 256, 512] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpSection {
    pub layers: Vec<usize>,
    pub n: usize,
    pub checkpoint: String,
}

impl Default for DumpSection {
    fn default() -> Self {
        DumpSection { layers: vec![0, 1, 2], n: 24, checkpoint: String::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub jobs: usize,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub props: PropsSection,
    pub shift: ShiftSection,
    pub nc1: Nc1Section,
    pub dump: DumpSection,
    /// Directory of the config file; paths resolve against it.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: "out".into(),
            jobs: 1,
            model: default_model(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            props: PropsSection::default(),
            shift: ShiftSection::default(),
            nc1: Nc1Section::default(),
            dump: DumpSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn default_model() -> ModelConfig {
    ModelConfig { vocab: tape_core::tasks::VOCAB_SIZE, n_ctx: 96, c: 64, heads: 4, blocks: 8, ..ModelConfig::default() }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        details: format!("bad value '{value}' for key '{key}'"),
    })
}

fn parse_list_f64(key: &str, value: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

fn parse_list_usize(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig { base_dir: base_dir.to_path_buf(), ..RunConfig::default() };
        let mut model_lines = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                details: format!("line {}: expected key=value, got '{line}'", lineno + 1),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(mkey) = key.strip_prefix("model.") {
                model_lines.push_str(&format!("{mkey}={value}\n"));
                continue;
            }
            match key {
                "seed" => cfg.seed = parse_num(key, value)?,
                "out" => cfg.out = value.to_string(),
                "jobs" => cfg.jobs = parse_num(key, value)?,
                "train.lr" => cfg.train.lr = parse_num(key, value)?,
                "train.beta1" => cfg.train.beta1 = parse_num(key, value)?,
                "train.beta2" => cfg.train.beta2 = parse_num(key, value)?,
                "train.weight_decay" => cfg.train.weight_decay = parse_num(key, value)?,
                "train.batch" => cfg.train.batch = parse_num(key, value)?,
                "train.steps" => cfg.train.steps = parse_num(key, value)?,
                "train.start_step" => cfg.train.start_step = parse_num(key, value)?,
                "train.warmup_steps" => cfg.train.warmup_steps = parse_num(key, value)?,
                "train.schedule_total_steps" => {
                    cfg.train.schedule_total_steps = parse_num(key, value)?
                }
                "train.lr_final" => cfg.train.lr_final = parse_num(key, value)?,
                "train.max_len" => cfg.train.max_len = parse_num(key, value)?,
                "train.dataset_size" => cfg.train.dataset_size = parse_num(key, value)?,
                "train.msd_first" => cfg.train.msd_first = parse_num(key, value)?,
                "train.log_every" => cfg.train.log_every = parse_num(key, value)?,
                "train.dataset_cache" => cfg.train.dataset_cache = value.to_string(),
                "train.resume_from" => cfg.train.resume_from = value.to_string(),
                "eval.checkpoint" => cfg.eval.checkpoint = value.to_string(),
                "eval.rope_checkpoint" => cfg.eval.rope_checkpoint = value.to_string(),
                "eval.max_eval_len" => cfg.eval.max_eval_len = parse_num(key, value)?,
                "eval.samples_per_cell" => cfg.eval.samples_per_cell = parse_num(key, value)?,
                "props.trials" => cfg.props.trials = parse_num(key, value)?,
                "props.n" => cfg.props.n = parse_num(key, value)?,
                "props.tol" => cfg.props.tol = parse_num(key, value)?,
                "shift.deltas" => cfg.shift.deltas = parse_list_f64(key, value)?,
                "shift.bos_count" => cfg.shift.bos_count = parse_num(key, value)?,
                "shift.tol" => cfg.shift.tol = parse_num(key, value)?,
                "shift.n" => cfg.shift.n = parse_num(key, value)?,
                "nc1.max_n" => cfg.nc1.max_n = parse_num(key, value)?,
                "nc1.instances" => cfg.nc1.instances = parse_num(key, value)?,
                "nc1.sweep" => cfg.nc1.sweep = parse_list_usize(key, value)?,
                "dump.layers" => cfg.dump.layers = parse_list_usize(key, value)?,
                "dump.n" => cfg.dump.n = parse_num(key, value)?,
                "dump.checkpoint" => cfg.dump.checkpoint = value.to_string(),
                _ => {
                    return Err(Error::Config {
                        details: format!("line {}: unknown key '{key}'", lineno + 1),
                    })
                }
            }
        }
        if !model_lines.is_empty() {
            cfg.model.apply_kv(&model_lines).map_err(|e| Error::Config {
                details: format!("model section: {e}"),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        RunConfig::parse(&text, &base)
    }

    /// Canonical serialization; `parse(to_kv(c)) == c` for any config.
    pub fn to_kv(&self) -> String {
        let mut lines: Vec<String> = self
            .model
            .to_kv()
            .lines()
            .map(|l| format!("model.{l}"))
            .collect();
        let join_f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        lines.extend([
            format!("dump.checkpoint={}", self.dump.checkpoint),
            format!("dump.layers={}", join_u(&self.dump.layers)),
            format!("dump.n={}", self.dump.n),
            format!("eval.checkpoint={}", self.eval.checkpoint),
            format!("eval.max_eval_len={}", self.eval.max_eval_len),
            format!("eval.rope_checkpoint={}", self.eval.rope_checkpoint),
            format!("eval.samples_per_cell={}", self.eval.samples_per_cell),
            format!("jobs={}", self.jobs),
            format!("nc1.instances={}", self.nc1.instances),
            format!("nc1.max_n={}", self.nc1.max_n),
            format!("nc1.sweep={}", join_u(&self.nc1.sweep)),
            format!("out={}", self.out),
            format!("props.n={}", self.props.n),
            format!("props.tol={}", self.props.tol),
            format!("props.trials={}", self.props.trials),
            format!("seed={}", self.seed),
            format!("shift.bos_count={}", self.shift.bos_count),
            format!("shift.deltas={}", join_f(&self.shift.deltas)),
            format!("shift.n={}", self.shift.n),
            format!("shift.tol={}", self.shift.tol),
            format!("train.batch={}", self.train.batch),
            format!("train.beta1={}", self.train.beta1),
            format!("train.beta2={}", self.train.beta2),
            format!("train.dataset_cache={}", self.train.dataset_cache),
            format!("train.dataset_size={}", self.train.dataset_size),
            format!("train.log_every={}", self.train.log_every),
            format!("train.lr={}", self.train.lr),
            format!("train.lr_final={}", self.train.lr_final),
            format!("train.max_len={}", self.train.max_len),
            format!("train.msd_first={}", self.train.msd_first),
            format!("train.resume_from={}", self.train.resume_from),
            format!("train.schedule_total_steps={}", self.train.schedule_total_steps),
            format!("train.start_step={}", self.train.start_step),
            format!("train.steps={}", self.train.steps),
            format!("train.warmup_steps={}", self.train.warmup_steps),
            format!("train.weight_decay={}", self.train.weight_decay),
        ]);
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// FNV-1a hash of the canonical serialization.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_kv().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }

    /// Resolve a possibly relative path against the config directory.
    pub fn resolve(&self, p: &str) -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            self.base_dir.join(pb)
        }
    }
}
