//! `fvg`: synthesize datasets, train, evaluate, check gradients and sweep
//! ablations from the command line.

mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "fvg",
    version,
    about = "Foreground-guided adaptation over pre-extracted embeddings"
)]
struct Cli {
    /// Worker threads for per-sample parallelism (defaults to all cores).
    #[arg(long, env = "FVG_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Train the base branch and/or the prior-calibration branch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate a list of ablation presets.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Training samples per base class.
    #[arg(long, default_value_t = 16)]
    shots: usize,
    /// Strength of the shared background in full-image features, in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    fg_advantage: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Evaluation samples per class.
    #[arg(long, default_value_t = 50)]
    eval_per_class: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Schedule {
    Constant,
    Cosine,
}

/// Hyperparameters shared by `train` and `ablate`.
#[derive(Debug, Clone, Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// SGD learning rate.
    #[arg(long, default_value_t = 0.0035)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Temperature of every soft distribution.
    #[arg(long, default_value_t = 2.0)]
    tau_d: f64,
    /// Weight of the foreground distillation term.
    #[arg(long, default_value_t = 10.0)]
    lambda_d: f64,
    /// Adapter bottleneck width (halved feature dimension if not smaller
    /// than it).
    #[arg(long, default_value_t = 64)]
    dim_fdc: usize,
    /// Hidden width of both reliability gates.
    #[arg(long, default_value_t = 32)]
    dim_rg: usize,
    /// Multiplier applied to cosine similarities to form logits.
    #[arg(long, default_value_t = 100.0)]
    logit_scale: f64,
    /// Gate depth: 1 = affine head only, 2 = one hidden layer, 3 = two.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
    gate_layers: u8,
    /// Disable a loss term (frg, fdc_ce, fdc_dist, pc_ce, pc_kl); repeatable.
    #[arg(long = "disable", value_name = "TERM")]
    disabled: Vec<String>,
    /// Apply a named ablation preset (full, baseline, fdc-only, pc-only,
    /// no-pc, no-frg, no-fdc-ce, no-dist, no-pc-ce, no-pc-kl).
    #[arg(long)]
    ablate: Option<String>,
    /// Adapt only the image side.
    #[arg(long)]
    no_textual_adapter: bool,
    /// Foreground-gate indicators as three 0/1 digits: entropy gap,
    /// distribution cosine, area ratio.
    #[arg(long, default_value = "111")]
    frg_indicators: String,
    /// Reliability-gate indicators as three 0/1 digits: backbone entropy,
    /// prior entropy, distribution cosine.
    #[arg(long, default_value = "111")]
    brg_indicators: String,
    /// Let only the gate's own BCE term train the foreground gate.
    #[arg(long)]
    stop_grad_trust: bool,
    /// Replace the foreground gate by this constant.
    #[arg(long)]
    fixed_r: Option<f64>,
    /// Replace the reliability gate by this constant.
    #[arg(long)]
    fixed_b: Option<f64>,
    #[arg(long, value_enum, default_value_t = Schedule::Constant)]
    lr_schedule: Schedule,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and the report, history and timing files.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Train only the base branch.
    #[arg(long, conflicts_with = "pc_only")]
    base_only: bool,
    /// Train only the prior-calibration branch.
    #[arg(long)]
    pc_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BranchArg {
    Base,
    New,
    Both,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = BranchArg::Both)]
    branch: BranchArg,
    /// Also append the report line to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    tau_d: f64,
    #[arg(long, default_value_t = 10.0)]
    lambda_d: f64,
    #[arg(long, default_value_t = 100.0)]
    logit_scale: f64,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=3))]
    gate_layers: u8,
    /// Negate analytic gradients before comparing (negative control).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "ablate")]
    out: PathBuf,
    /// Presets to run, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "baseline,fdc-only,pc-only,no-pc,no-frg,full"
    )]
    presets: Vec<String>,
    #[command(flatten)]
    hyper: HyperArgs,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
