//! `mamba-lab`: data generation, training, evaluation, construction
//! certification and window-order sweeps for selective state space models
//! on random Markov chains.
//!
//! Exit codes: 0 success or certified, 1 failed certification or runtime
//! failure, 2 usage or configuration error.

mod config;
mod eval;
mod output;
mod sweep;
mod train;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use markov_mamba::construction::{build_construction_params, construction_config, perturb_previous_weight, verify_construction};
use markov_mamba::markov::{write_sequences, DataManifest};
use markov_mamba::model::{Checkpoint, Variant};
use markov_mamba::par::Execution;

use config::{ExperimentConfig, ModelSection};
use output::{read_json, run_dir, write_json, OUT_ENV};
use train::{RunFiles, RunOptions, RunState};

/// A configuration or invocation problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "mamba-lab",
    version,
    about = "Selective SSMs learning add-β smoothing on random Markov chains"
)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    out_root: PathBuf,
    /// Run every batch on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample sequences to a text file with a manifest that regenerates them.
    GenData(GenDataArgs),
    /// Train a model, checkpointing at every log row.
    Train(TrainArgs),
    /// Measure a checkpoint against the Bayes-optimal estimator.
    Eval(EvalArgs),
    /// Build the explicit MambaZero construction and certify it exhaustively.
    VerifyConstruction(VerifyArgs),
    /// Train the (order, window, seed) grid.
    Sweep(SweepArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment config JSON; missing sections take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory name under the output root.
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Switch off a component; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    p_switch: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    Zero,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    NoConv,
    NoRelu,
    NoGating,
    SumMlp,
}

impl Overrides {
    fn apply(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load_or_default(self.config.as_deref())?;
        if let Some(v) = self.variant {
            cfg.model.variant = match v {
                VariantArg::Full => Variant::Full,
                VariantArg::Zero => Variant::Zero,
            };
        }
        for a in &self.ablate {
            match a {
                Ablation::NoConv => cfg.model.use_conv = false,
                Ablation::NoRelu => cfg.model.use_relu = Some(false),
                Ablation::NoGating => cfg.model.use_gating = Some(false),
                Ablation::SumMlp => cfg.model.mlp_combine = markov_mamba::model::MlpCombine::Sum,
            }
        }
        let d = &mut cfg.data;
        d.order = self.order.unwrap_or(d.order);
        d.beta = self.beta.unwrap_or(d.beta);
        d.length = self.length.unwrap_or(d.length);
        d.batch = self.batch.unwrap_or(d.batch);
        if self.p_switch.is_some() {
            d.p_switch = self.p_switch;
        }
        cfg.model.window = self.window.unwrap_or(cfg.model.window);
        let t = &mut cfg.train;
        t.seed = self.seed.unwrap_or(t.seed);
        t.iterations = self.iterations.unwrap_or(t.iterations);
        t.eval_every = self.eval_every.unwrap_or(t.eval_every);
        if self.run_id.is_some() {
            cfg.output.run_id = self.run_id.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Regenerate the files described by an existing manifest.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Start over even if the run directory holds a checkpoint.
    #[arg(long)]
    fresh: bool,
    /// Stop after this many updates; must be a multiple of eval_every.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, run directory, or `oracle` for the reference
    /// estimator itself.
    #[arg(long)]
    checkpoint: String,
    /// Experiment config; defaults to the config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `eval/` beside the checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Longest enumerated sequence length.
    #[arg(long, default_value_t = 16)]
    tmax: usize,
    /// Scale the previous-step convolution weight by 1 + this before
    /// verifying; a diagnostic that should make certification fail.
    #[arg(long, allow_hyphen_values = true)]
    perturb: Option<f64>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated Markov orders.
    #[arg(long, value_delimiter = ',')]
    orders: Vec<usize>,
    /// Comma-separated convolution windows.
    #[arg(long, value_delimiter = ',')]
    windows: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.chain().any(|c| {
                c.is::<UsageError>() || matches!(c.downcast_ref::<markov_mamba::Error>(), Some(markov_mamba::Error::Parameter(_)))
            });
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::GenData(args) => gen_data(&cli.out_root, args),
        Command::Train(args) => train_cmd(&cli.out_root, args, exec, cli.quiet),
        Command::Eval(args) => eval_cmd(args, exec),
        Command::VerifyConstruction(args) => verify_cmd(&cli.out_root, args, exec),
        Command::Sweep(args) => sweep_cmd(&cli.out_root, args, exec, cli.quiet),
    }
}

fn out_root(cli_root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.root.clone().unwrap_or_else(|| cli_root.to_path_buf())
}

fn gen_data(root: &Path, args: GenDataArgs) -> anyhow::Result<ExitCode> {
    let manifest = match &args.manifest {
        Some(path) => {
            let mut m: DataManifest = read_json(path).map_err(|e| usage(e.to_string()))?;
            m.sequence_seeds.clear();
            m
        }
        None => {
            let cfg = args.overrides.apply()?;
            let d = cfg.data;
            DataManifest {
                order: d.order,
                beta: d.beta,
                length: d.length,
                batch: d.batch,
                seed: cfg.train.seed,
                p_switch: d.p_switch,
                sequence_seeds: Vec::new(),
            }
        }
    };
    let sequences = manifest.generate().map_err(|e| usage(e.to_string()))?;
    let manifest = DataManifest {
        sequence_seeds: sequences.iter().filter_map(|s| s.seed).collect(),
        ..manifest
    };
    let run_id = args.overrides.run_id.clone().unwrap_or_else(|| {
        let kind = if manifest.p_switch.is_some() { "switch" } else { "markov" };
        format!(
            "data-{kind}-k{}-T{}-B{}-s{}",
            manifest.order, manifest.length, manifest.batch, manifest.seed
        )
    });
    let dir = run_dir(root, &run_id)?;
    write_sequences(&dir.join("sequences.txt"), &sequences)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("{}", dir.join("sequences.txt").display());
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(root: &Path, args: TrainArgs, exec: Execution, quiet: bool) -> anyhow::Result<ExitCode> {
    let cfg = args.overrides.apply()?;
    let run_id = cfg.output.run_id.clone().unwrap_or_else(|| cfg.default_run_id());
    let dir = run_dir(&out_root(root, &cfg), &run_id)?;
    let opts = RunOptions {
        fresh: args.fresh,
        stop_after: args.stop_after,
        exec,
        quiet,
    };
    match train::run(&RunFiles::new(&dir), &cfg, opts)? {
        RunState::Complete(s) => {
            let r = &s.final_row;
            println!(
                "{}: {} iterations, eval loss {:.5}, gap {:.5}",
                dir.display(),
                s.iterations,
                r.eval_loss,
                r.loss_gap
            );
        }
        RunState::Stopped { iteration } => println!("{}: stopped at iteration {iteration}", dir.display()),
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(args: EvalArgs, exec: Execution) -> anyhow::Result<ExitCode> {
    let subject = eval::Subject::load(&args.checkpoint)?;
    let sibling = match &subject {
        eval::Subject::Oracle => None,
        eval::Subject::Model { .. } => eval::checkpoint_path(Path::new(&args.checkpoint)).parent().map(Path::to_path_buf),
    };
    let cfg_path = args
        .config
        .clone()
        .or_else(|| sibling.as_ref().map(|d| d.join("config.json")).filter(|p| p.exists()));
    let cfg = ExperimentConfig::load_or_default(cfg_path.as_deref())?;
    let out = match (args.out_dir, sibling) {
        (Some(out), _) => out,
        (None, Some(dir)) => dir.join("eval"),
        (None, None) => return Err(usage("--out-dir is required when evaluating the oracle")),
    };
    let s = eval::evaluate(&subject, &cfg, &out, exec)?;
    println!(
        "{}: eval loss {:.5}, oracle {:.5}, gap {:.5}, L1 {:.5}",
        out.display(),
        s.eval_loss,
        s.oracle_loss,
        s.loss_gap,
        s.l1_distance
    );
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(root: &Path, args: VerifyArgs, exec: Execution) -> anyhow::Result<ExitCode> {
    let mut params = build_construction_params(args.beta, args.epsilon).map_err(|e| usage(e.to_string()))?;
    if args.tmax == 0 {
        return Err(usage("--tmax must be at least 1"));
    }
    if let Some(rel) = args.perturb {
        perturb_previous_weight(&mut params, rel);
    }
    let run_id = args.run_id.clone().unwrap_or_else(|| {
        let mut id = format!("construction-b{}-e{}-t{}", args.beta, args.epsilon, args.tmax);
        if let Some(rel) = args.perturb {
            id.push_str(&format!("-perturb{rel}"));
        }
        id
    });
    let dir = run_dir(root, &run_id)?;
    let cert = verify_construction(&params, args.beta, args.epsilon, args.tmax, exec).context("verification")?;

    let model = construction_config();
    let mut cfg = ExperimentConfig {
        model: ModelSection::from(&model),
        ..ExperimentConfig::default()
    };
    cfg.data.beta = args.beta;
    cfg.output.run_id = Some(run_id);
    cfg.write(&dir.join("config.json"))?;
    write_json(&dir.join("checkpoint.json"), &Checkpoint::new(model, &params, 0))?;
    write_json(&dir.join("certificate.json"), &cert)?;

    println!(
        "{}: max KL {:.3e} (bound {}), exact-match max KL {:.3e} over {} positions, {:.2}s",
        dir.display(),
        cert.max_kl,
        args.epsilon,
        cert.max_kl_exact,
        cert.positions,
        cert.runtime_secs
    );
    if cert.certified {
        println!("certified");
        return Ok(ExitCode::SUCCESS);
    }
    if let Some(f) = &cert.failure {
        println!("failure: {} at position {} of {}", f.reason, f.position, f.sequence);
    }
    if let Some(w) = &cert.witness {
        println!("witness: KL {:.6e} at position {} of {}", w.kl, w.position, w.sequence);
    }
    if let Some(w) = cert
        .exact_witness
        .as_ref()
        .filter(|w| w.kl > markov_mamba::construction::EXACT_TOLERANCE)
    {
        println!("exact-match witness: KL {:.6e} at position {} of {}", w.kl, w.position, w.sequence);
    }
    println!("not certified");
    Ok(ExitCode::from(1))
}

fn sweep_cmd(root: &Path, args: SweepArgs, exec: Execution, quiet: bool) -> anyhow::Result<ExitCode> {
    let mut cfg = args.overrides.apply()?;
    if !args.orders.is_empty() {
        cfg.sweep.orders = args.orders;
    }
    if !args.windows.is_empty() {
        cfg.sweep.windows = args.windows;
    }
    if !args.seeds.is_empty() {
        cfg.sweep.seeds = args.seeds;
    }
    if args.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    cfg.validate()?;
    let run_id = cfg.output.run_id.clone().unwrap_or_else(|| "sweep".to_string());
    let dir = run_dir(&out_root(root, &cfg), &run_id)?;
    cfg.write(&dir.join("config.json"))?;
    let result = sweep::run(&cfg, &dir, args.jobs, exec, quiet)?;
    for c in &result.cells {
        let gap = c.loss_gap.map_or_else(|| "error".to_string(), |g| format!("{g:.5}"));
        println!("{} gap {gap} {}", c.key.id(), if c.pass { "pass" } else { "fail" });
    }
    let errored = result.cells.iter().any(|c| c.error.is_some());
    Ok(if errored { ExitCode::from(1) } else { ExitCode::SUCCESS })
}
