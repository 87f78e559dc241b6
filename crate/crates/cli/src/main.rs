//! `misr`: train, evaluate and run the multi-frame super-resolution model.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 usage or configuration
//! error, 3 data error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid config key '{key}': {msg}")]
    Config { key: String, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] misr_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use misr_core::Error as E;
        match self {
            Self::Verification(_) | Self::Core(E::NonFinite(_)) => 1,
            Self::Usage(_) | Self::Config { .. } | Self::Core(E::Config(_)) => 2,
            Self::Data(_) | Self::Io(_) | Self::Core(_) => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BandArg {
    Nir,
    Red,
}

#[derive(Debug, Parser)]
#[command(name = "misr", version, about = "Multi-frame super-resolution for PROBA-V style scenes")]
struct Cli {
    /// Config file with [run], [model] and [train] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or output root for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    band: Option<BandArg>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra override, `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; writes checkpoints, history.csv and config.resolved.
    Train(TrainArgs),
    /// Score a checkpoint or the bicubic baseline on scenes with targets.
    Eval(EvalArgs),
    /// Super-resolve one scene directory into a 16-bit PNG.
    Infer(InferArgs),
    /// Write synthetic scenes in the PROBA-V directory layout.
    Synth(SynthArgs),
    /// Run the gradient-check and oracle suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding `<band>/imgset*` directories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Separate validation root; otherwise a share of `--data` is held out.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Frames per sample; also sets the model frame count.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub shuffle_t: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Baseline {
    Bicubic,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// Score a baseline instead of a checkpoint.
    #[arg(long, value_enum, conflicts_with = "checkpoint")]
    pub baseline: Option<Baseline>,
    /// Central crop in LR pixels before scoring.
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene directory with LR*.png (and optionally QM*.png).
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of HR PNG rasters; without it procedural rasters are drawn.
    #[arg(long)]
    pub hr: Option<PathBuf>,
    /// Number of procedural scenes.
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// LR side of procedural scenes.
    #[arg(long, default_value_t = 40)]
    pub lr_size: usize,
    #[arg(long, default_value_t = 9)]
    pub frames: usize,
    #[arg(long, default_value_t = 3)]
    pub scale: usize,
    /// Shift range in LR pixels.
    #[arg(long, default_value_t = 0.5)]
    pub max_shift: f64,
    /// Blur sigma in HR pixels.
    #[arg(long, default_value_t = 1.0)]
    pub blur: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    /// Cloud cover per frame.
    #[arg(long, default_value_t = 0.1)]
    pub coverage: f64,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    /// Corrupts the derivative of the named op (negative control).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    let mut r = config::Resolver::new(cli.config.as_deref())?;
    r.apply_opt("train.seed", cli.seed)?;
    r.apply_opt("run.out", cli.out.as_ref().map(|p| p.display().to_string()))?;
    r.apply_opt("run.band", cli.band.map(|b| format!("{b:?}").to_lowercase()))?;
    r.apply_assignments(&cli.sets)?;
    match cli.command {
        Command::Train(a) => commands::train(r, &a),
        Command::Eval(a) => commands::eval(r, &a),
        Command::Infer(a) => commands::infer(&a),
        Command::Synth(a) => commands::synth(r, &a),
        Command::Check(a) => commands::check(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
