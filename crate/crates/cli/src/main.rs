//! `ibinn`: train, evaluate and probe IB-INN models from the command line.
//!
//! Every command writes its outputs and a `manifest.json` into `--out`.
//! Exit status is 0 on success, 1 when a requested check failed and 2 on
//! errors.

mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use context::Run;

#[derive(Parser)]
#[command(name = "ibinn", version, about = "Invertible generative classifiers with an information bottleneck objective")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct GlobalArgs {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialization and noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Dequantization noise level.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Extra config entries, `key=value`; applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model. With --checkpoint, resume from it.
    Train,
    /// Test-set metrics of a checkpoint.
    Eval,
    /// Out-of-distribution entropy increase and typicality AUC.
    Ood(OodArgs),
    /// Draw samples of one class.
    Sample(SampleArgs),
    /// Latent-space interpolation between two inputs.
    Interpolate(InterpolateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradArgs),
    /// One model per noise level.
    SigmaSweep(SweepArgs),
    /// One model per gamma.
    GammaSweep(SweepArgs),
    /// Exact quantization-recovery error against its bound.
    BoundCheck(BoundArgs),
}

#[derive(Args)]
pub struct OodArgs {
    /// Comma-separated subset of rotate,noise,holdout,shift.
    #[arg(long)]
    pub kinds: Option<String>,
    /// Overrides each kind's default strength.
    #[arg(long)]
    pub strength: Option<f64>,
    /// Fail unless every typicality AUC reaches this (percent).
    #[arg(long)]
    pub min_auc: Option<f64>,
    /// Fail unless every entropy increase is positive.
    #[arg(long)]
    pub require_entropy_increase: bool,
    /// Also write each OoD set in dataset format.
    #[arg(long)]
    pub save_sets: bool,
}

#[derive(Args)]
pub struct SampleArgs {
    /// 1-based class, as in dataset files.
    #[arg(long, default_value_t = 1)]
    pub class: usize,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Args)]
pub struct InterpolateArgs {
    /// Start point, comma-separated.
    #[arg(long)]
    pub from: String,
    /// End point, comma-separated.
    #[arg(long)]
    pub to: String,
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
}

#[derive(Args)]
pub struct GradArgs {
    #[arg(long, default_value_t = 60)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Comma-separated values.
    #[arg(long = "values", visible_aliases = ["sigmas", "gammas"])]
    pub values: String,
    /// Include the four OoD sets in every row.
    #[arg(long)]
    pub with_ood: bool,
    /// Check the expected trend and fail if it does not hold.
    #[arg(long)]
    pub check: bool,
}

#[derive(Args)]
pub struct BoundArgs {
    /// Quantization levels F; defaults to the config's.
    #[arg(long)]
    pub levels: Option<u32>,
    /// Distribution over the F levels, comma-separated; random if absent.
    #[arg(long)]
    pub probs: Option<String>,
    /// Noise levels, comma-separated; defaults to --sigma.
    #[arg(long)]
    pub sigmas: Option<String>,
}

fn dispatch(cli: &Cli) -> anyhow::Result<bool> {
    let g = &cli.global;
    let ckpt = g.checkpoint.as_deref();
    let name = match &cli.command {
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Ood(_) => "ood",
        Command::Sample(_) => "sample",
        Command::Interpolate(_) => "interpolate",
        Command::Gradcheck(_) => "gradcheck",
        Command::SigmaSweep(_) => "sigma-sweep",
        Command::GammaSweep(_) => "gamma-sweep",
        Command::BoundCheck(_) => "bound-check",
    };
    let mut run = Run::new(name, g)?;
    let ok = match &cli.command {
        Command::Train => commands::train(&mut run, ckpt)?,
        Command::Eval => commands::eval(&mut run, ckpt)?,
        Command::Ood(a) => commands::ood(&mut run, ckpt, a)?,
        Command::Sample(a) => commands::sample(&mut run, ckpt, a)?,
        Command::Interpolate(a) => commands::interpolate(&mut run, ckpt, a)?,
        Command::Gradcheck(a) => commands::gradcheck(&mut run, ckpt, a)?,
        Command::SigmaSweep(a) => commands::sigma_sweep_cmd(&mut run, a)?,
        Command::GammaSweep(a) => commands::gamma_sweep_cmd(&mut run, a)?,
        Command::BoundCheck(a) => commands::bound_check(&mut run, a)?,
    };
    run.finish()?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
