//! Command-line entry point: symmetry suites, the word-problem
//! construction sweep, training, evaluation grids, and encoding dumps.
//!
//! Exit codes: 0 success, 1 suite/assertion failure, 2 usage or config
//! error, 3 I/O error.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use tape_core::equivariance::{
    block_f, block_g, block_logits_fn, broken_flatten_pe_f, broken_r_mixing_g,
    check_ortho_equivariance, check_perm_equivariance, check_shift_invariance, EquivarianceReport,
    HarnessSpec, MaskKind, OutputLaw,
};
use tape_core::error::Error;
use tape_core::model::ModelParams;
use tape_core::nc1;
use tape_core::posenc::{export_pe_dot_products, init_positions, PosTensor};
use tape_core::rng::Rng;
use tape_core::tasks;
use tape_core::tensor::Tensor;

#[derive(Parser)]
#[command(name = "tape", about = "contextualized equivariant positional encoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel jobs (overrides the config's `jobs`).
    #[arg(long)]
    jobs: Option<usize>,
    /// Trial count for property suites (overrides `props.trials`).
    #[arg(long)]
    trials: Option<u64>,
    /// Seed override; beats the TAPE_SEED environment variable.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every symmetry suite (equivariance, rotation invariance, shift
    /// protocols) plus the mutation checks; emits a JSONL report.
    Props {
        #[command(flatten)]
        common: Common,
        /// Swap in the deliberately broken layers; the run must then fail.
        #[arg(long)]
        break_equivariance: bool,
    },
    /// Build the word-problem construction, sweep lengths against the
    /// brute-force oracle, and emit accuracy/margin tables.
    Nc1 {
        #[command(flatten)]
        common: Common,
        /// Corrupt a construction constant; the sweep must then detect
        /// mismatches.
        #[arg(long)]
        corrupt: bool,
    },
    /// Train on the addition task and write a checkpoint plus loss curve.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the per-length exact-match grid.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Export per-layer encoding dot-product grids as CSV.
    DumpPe {
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } | Error::Contract { .. } => ExitCode::from(2),
        Error::Io { .. } | Error::Format { .. } => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Props { common, break_equivariance } => cmd_props(common, break_equivariance),
        Command::Nc1 { common, corrupt } => cmd_nc1(common, corrupt),
        Command::Train { common } => cmd_train(common),
        Command::Eval { common } => cmd_eval(common),
        Command::DumpPe { common } => cmd_dump_pe(common),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out_dir: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> Result<Ctx, Error> {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Ok(env_seed) = std::env::var("TAPE_SEED") {
            cfg.seed = env_seed.parse().map_err(|_| Error::Config {
                details: format!("TAPE_SEED must be an unsigned integer, got '{env_seed}'"),
            })?;
        }
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = common.jobs {
            cfg.jobs = jobs;
        }
        if let Some(trials) = common.trials {
            cfg.props.trials = trials;
        }
        let out_dir = match &common.out {
            Some(p) => p.clone(),
            None => cfg.resolve(&cfg.out.clone()),
        };
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Ctx { cfg, out_dir })
    }

    fn meta_line(&self, tool: &str) -> String {
        format!(
            "{{\"tool\":\"{tool}\",\"config_hash\":\"{:016x}\",\"seed\":{}}}",
            self.cfg.hash(),
            self.cfg.seed
        )
    }

    fn csv_header(&self) -> String {
        format!("# config_hash={:016x} seed={}\n", self.cfg.hash(), self.cfg.seed)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), Error> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }
}

fn cmd_props(common: Common, break_equivariance: bool) -> Result<bool, Error> {
    let ctx = Ctx::new(&common)?;
    let cfg = &ctx.cfg;
    if cfg.props.trials == 0 {
        return Err(Error::Config { details: "props.trials must be >= 1".into() });
    }
    let mcfg = &cfg.model;
    mcfg.validate()?;
    let mut rng = Rng::new(cfg.seed, 0);
    let params = ModelParams::init(mcfg.clone(), &mut rng)?;
    let spec = HarnessSpec {
        n: cfg.props.n,
        c: mcfg.c,
        e_shape: vec![cfg.props.n, mcfg.heads, mcfg.blocks, mcfg.l, mcfg.r],
        mask: MaskKind::CausalPermSprinkle,
    };
    let trials = cfg.props.trials;
    let tol = cfg.props.tol;
    let mut lines = vec![ctx.meta_line("props")];
    let mut all_pass = true;

    let depth = params.layers.len().max(1);
    let per_layer = (trials / depth as u64).max(1);
    let mut reports: Vec<EquivarianceReport> = Vec::new();

    for (li, bp) in params.layers.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(1000 + 100 * li as u64);
        let d = mcfg.heads * mcfg.blocks * mcfg.l * mcfg.r;
        let fold = {
            let mut r = Rng::new(cfg.seed, 77 + li as u64);
            Tensor::from_fn(&[mcfg.c, d], |_| r.gauss())
        };
        let i = mcfg.i_dim_effective();
        let hr = mcfg.heads * mcfg.r;
        let (w1, w2) = {
            let mut r = Rng::new(cfg.seed, 88 + li as u64);
            (Tensor::from_fn(&[i, hr], |_| r.gauss()), Tensor::from_fn(&[hr, i], |_| r.gauss()))
        };
        if break_equivariance {
            reports.push(check_perm_equivariance(
                &format!("layer{li}.f_perm(broken)"),
                broken_flatten_pe_f(mcfg, bp, &fold),
                OutputLaw::PermuteInvariant,
                &spec,
                per_layer,
                tol,
                seed,
            )?);
            reports.push(check_ortho_equivariance(
                &format!("layer{li}.g_ortho(broken)"),
                broken_r_mixing_g(mcfg, bp, &w1, &w2),
                OutputLaw::PermuteEquivariant,
                &spec,
                per_layer,
                tol,
                seed + 1,
            )?);
            continue;
        }
        reports.push(check_perm_equivariance(
            &format!("layer{li}.f_perm"),
            block_f(mcfg, bp),
            OutputLaw::PermuteInvariant,
            &spec,
            per_layer,
            tol,
            seed,
        )?);
        reports.push(check_perm_equivariance(
            &format!("layer{li}.g_perm"),
            block_g(mcfg, bp),
            OutputLaw::PermuteEquivariant,
            &spec,
            per_layer,
            tol,
            seed + 1,
        )?);
        reports.push(check_ortho_equivariance(
            &format!("layer{li}.f_ortho"),
            block_f(mcfg, bp),
            OutputLaw::PermuteInvariant,
            &spec,
            per_layer,
            tol,
            seed + 2,
        )?);
        reports.push(check_ortho_equivariance(
            &format!("layer{li}.g_ortho"),
            block_g(mcfg, bp),
            OutputLaw::PermuteEquivariant,
            &spec,
            per_layer,
            tol,
            seed + 3,
        )?);
        reports.push(check_ortho_equivariance(
            &format!("layer{li}.logits_invariant"),
            block_logits_fn(mcfg, bp),
            OutputLaw::PermuteInvariant,
            &spec,
            per_layer,
            1e-10,
            seed + 4,
        )?);

        // mutation coverage: both broken variants must be detected
        let mutation = check_perm_equivariance(
            &format!("layer{li}.mutation_flatten_pe"),
            broken_flatten_pe_f(mcfg, bp, &fold),
            OutputLaw::PermuteInvariant,
            &spec,
            per_layer.min(5),
            tol,
            seed + 5,
        )?;
        if mutation.pass {
            eprintln!("vacuous suite: flattened-PE mutation was not detected");
            all_pass = false;
        }
        reports.push(mutation);
        let mutation = check_ortho_equivariance(
            &format!("layer{li}.mutation_r_mixing"),
            broken_r_mixing_g(mcfg, bp, &w1, &w2),
            OutputLaw::PermuteEquivariant,
            &spec,
            per_layer.min(5),
            tol,
            seed + 6,
        )?;
        if mutation.pass {
            eprintln!("vacuous suite: rotation-mixing mutation was not detected");
            all_pass = false;
        }
        reports.push(mutation);
    }

    for rep in &reports {
        let is_mutation = rep.name.contains("mutation") || rep.name.contains("broken");
        if !is_mutation && !rep.pass {
            all_pass = false;
            eprintln!(
                "suite {} failed: max deviation {} (reproduce with seed {}, trial {:?})",
                rep.name, rep.max_deviation, rep.seed, rep.failing_trial
            );
        }
        if is_mutation && rep.name.contains("broken") && !rep.pass {
            // expected failure under --break-equivariance
            all_pass = false;
        }
        lines.push(rep.to_jsonl());
    }
    if break_equivariance {
        // the whole point is to fail; make the exit code reflect it
        all_pass = false;
    }

    // shift-invariance protocols on the full model
    if !break_equivariance {
        let tokens: Vec<usize> = (0..cfg.shift.n).map(|_| rng.below(mcfg.vocab)).collect();
        let shift = check_shift_invariance(
            &params,
            &tokens,
            &cfg.shift.deltas,
            tasks::BOS,
            cfg.shift.bos_count,
            cfg.shift.tol,
            cfg.seed,
        )?;
        if !shift.pass {
            all_pass = false;
            eprintln!("shift-invariance suite failed: {:?}", shift.id_shift);
        }
        lines.push(shift.to_jsonl());
    }

    ctx.write("props.jsonl", &(lines.join("\n") + "\n"))?;
    println!(
        "props: {} suites, pass={all_pass} -> {}",
        reports.len(),
        ctx.out_dir.join("props.jsonl").display()
    );
    Ok(all_pass)
}

fn cmd_nc1(common: Common, corrupt: bool) -> Result<bool, Error> {
    let ctx = Ctx::new(&common)?;
    let cfg = &ctx.cfg;
    let mut net = nc1::build_construction();
    if corrupt {
        // shift the identity threshold: non-identity prefixes now leak
        // positive scores and get misclassified
        net.threshold -= 1.0;
        let mut q = net.query.data().to_vec();
        q[5] = net.threshold;
        net.query = Tensor::new(vec![nc1::R_DIM], q).expect("finite");
    }

    let mut csv = ctx.csv_header();
    csv.push_str("n,instances,mismatches,min_identity_score,max_nonidentity_score\n");
    let mut jsonl = vec![ctx.meta_line("nc1")];
    let mut pass = true;
    let mut first_failing_n = None;
    for &n in &cfg.nc1.sweep {
        let row = sweep_one(&net, n, cfg.nc1.instances, cfg.seed)?;
        if row.mismatches > 0 && first_failing_n.is_none() {
            first_failing_n = Some(n);
        }
        if n <= cfg.nc1.max_n && row.mismatches > 0 {
            pass = false;
        }
        csv.push_str(&format!(
            "{},{},{},{:.6e},{:.6e}\n",
            row.n, row.instances, row.mismatches, row.min_identity_score,
            row.max_nonidentity_score
        ));
        jsonl.push(serde_json::to_string(&row).expect("row serializes"));
    }
    ctx.write("nc1_sweep.csv", &csv)?;
    ctx.write("nc1_sweep.jsonl", &(jsonl.join("\n") + "\n"))?;
    match first_failing_n {
        Some(n) => println!("nc1: first length with mismatches: {n}"),
        None => println!("nc1: no mismatches at any swept length"),
    }
    println!("nc1: agreement up to n={} pass={pass}", cfg.nc1.max_n);
    Ok(pass)
}

fn sweep_one(
    net: &nc1::ConstructedNet,
    n: usize,
    instances: usize,
    seed: u64,
) -> Result<nc1::SweepRow, Error> {
    let mut row = nc1::SweepRow {
        n,
        instances,
        mismatches: 0,
        min_identity_score: f64::INFINITY,
        max_nonidentity_score: 0.0,
    };
    for k in 0..instances {
        let mut rng = Rng::new(seed, ((n as u64) << 32) | k as u64);
        let (inst, labels) = nc1::gen_word_problem(n, &mut rng)?;
        let out = nc1::run_construction(net, &inst)?;
        for i in 0..n {
            if out.decisions[i] != labels[i] {
                row.mismatches += 1;
            }
            if labels[i] {
                row.min_identity_score = row.min_identity_score.min(out.scores[i]);
            } else {
                row.max_nonidentity_score = row.max_nonidentity_score.max(out.scores[i]);
            }
        }
    }
    Ok(row)
}

fn cmd_train(common: Common) -> Result<bool, Error> {
    let ctx = Ctx::new(&common)?;
    let cfg = &ctx.cfg;
    cfg.model.validate()?;

    let data = if cfg.train.dataset_cache.is_empty() {
        tasks::gen_addition(
            cfg.train.max_len,
            cfg.train.dataset_size,
            cfg.train.msd_first,
            &mut Rng::new(cfg.seed, 1),
        )?
    } else {
        let path = ctx.cfg.resolve(&cfg.train.dataset_cache);
        if path.exists() {
            tasks::load_dataset(&path)?
        } else {
            let data = tasks::gen_addition(
                cfg.train.max_len,
                cfg.train.dataset_size,
                cfg.train.msd_first,
                &mut Rng::new(cfg.seed, 1),
            )?;
            tasks::save_dataset(&path, &data, &ctx.csv_header())?;
            data
        }
    };

    let mut params = if cfg.train.resume_from.is_empty() {
        ModelParams::init(cfg.model.clone(), &mut Rng::new(cfg.seed, 0))?
    } else {
        ModelParams::load(&ctx.cfg.resolve(&cfg.train.resume_from))?
    };

    let tc = tasks::TrainConfig {
        lr: cfg.train.lr,
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        weight_decay: cfg.train.weight_decay,
        batch: cfg.train.batch,
        steps: cfg.train.steps,
        start_step: cfg.train.start_step,
        seed: cfg.seed,
        jobs: cfg.jobs,
        log_every: cfg.train.log_every.max(1),
        warmup_steps: cfg.train.warmup_steps,
        schedule_total_steps: cfg.train.schedule_total_steps,
        lr_final: cfg.train.lr_final,
        ..tasks::TrainConfig::default()
    };
    let out = tasks::train(&mut params, &data, &tc)?;

    let ckpt = ctx.out_dir.join("checkpoint.tapb");
    params.save(&ckpt)?;
    let mut csv = ctx.csv_header();
    csv.push_str("step,loss\n");
    for (step, loss) in &out.loss_curve {
        csv.push_str(&format!("{step},{loss:.12}\n"));
    }
    ctx.write("loss_curve.csv", &csv)?;

    if let Some(step) = out.diverged_at {
        eprintln!("training diverged at step {step}; checkpoint holds the last finite state");
        return Ok(false);
    }
    let last = out.loss_curve.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    println!("train: {} steps, final loss {last:.6} -> {}", cfg.train.steps, ckpt.display());
    Ok(true)
}

fn cmd_eval(common: Common) -> Result<bool, Error> {
    let ctx = Ctx::new(&common)?;
    let cfg = &ctx.cfg;
    let eval_one = |ckpt: &str, name: &str| -> Result<f64, Error> {
        let params = ModelParams::load(&ctx.cfg.resolve(ckpt))?;
        let grid = tasks::evaluate_grid(
            &params,
            cfg.eval.max_eval_len,
            cfg.eval.samples_per_cell,
            cfg.train.max_len,
            cfg.train.msd_first,
            cfg.seed,
            cfg.jobs,
        )?;
        let csv = format!("{}{}", ctx.csv_header(), grid.to_csv());
        ctx.write(name, &csv)?;
        println!(
            "eval[{name}]: mean {:.4} in-dist {:.4} extrapolation {:.4}",
            grid.mean(),
            grid.mean_in_distribution(),
            grid.mean_extrapolation()
        );
        Ok(grid.mean())
    };
    eval_one(&cfg.eval.checkpoint, "grid.csv")?;
    if !cfg.eval.rope_checkpoint.is_empty() {
        eval_one(&cfg.eval.rope_checkpoint, "grid_rope.csv")?;
    }
    Ok(true)
}

fn cmd_dump_pe(common: Common) -> Result<bool, Error> {
    let ctx = Ctx::new(&common)?;
    let cfg = &ctx.cfg;
    cfg.model.validate()?;
    let params = if cfg.dump.checkpoint.is_empty() {
        ModelParams::init(cfg.model.clone(), &mut Rng::new(cfg.seed, 0))?
    } else {
        ModelParams::load(&ctx.cfg.resolve(&cfg.dump.checkpoint))?
    };
    let mut rng = Rng::new(cfg.seed, 2);
    let n = cfg.dump.n;
    let tokens: Vec<usize> = (0..n).map(|_| rng.below(params.config.vocab)).collect();
    let (_, e_trace) = tape_core::model::forward_tokens(&params, &tokens, 0.0)?;
    let meta = params.config.pe_meta(n)?;
    let positions = init_positions(0.0, n);
    for &layer in &cfg.dump.layers {
        if layer >= e_trace.len() {
            return Err(Error::Config {
                details: format!(
                    "dump layer {layer} out of range (model has {} encodings)",
                    e_trace.len()
                ),
            });
        }
        let pe = PosTensor::new(meta, e_trace[layer].clone())?;
        let csv = format!(
            "{}{}",
            ctx.csv_header(),
            export_pe_dot_products(&pe, &positions, &format!("layer{layer}"))?
        );
        ctx.write(&format!("pe_layer{layer}.csv"), &csv)?;
    }
    println!("dump-pe: wrote {} grids to {}", cfg.dump.layers.len(), ctx.out_dir.display());
    Ok(true)
}
