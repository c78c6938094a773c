use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sphereflow_cli::config::Config;
use sphereflow_cli::{analyze, eval, sample, train, CliError};

const ENV_HELP: &str = "Environment variables:
  SPHEREFLOW_SEED   overrides config key `seed`
  SPHEREFLOW_OUT    overrides config key `out`

Configuration precedence, lowest to highest: built-in defaults, --config
file, environment variables, trailing KEY=VALUE overrides, dedicated flags.

Exit codes: 0 success, 2 configuration error, 3 runtime numeric failure.";

#[derive(Parser)]
#[command(
    name = "sphereflow",
    version,
    about = "Spherical flow sequence model: train, sample, evaluate, analyze",
    after_help = ENV_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed override (highest precedence).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run worker pools with one thread for bitwise reproducibility.
    #[arg(long)]
    single_thread: bool,
    /// Config overrides, e.g. train.lr=0.001.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a denoiser; writes datasets, a metrics CSV, and checkpoints.
    Train {
        /// Continue from a checkpoint (reads the dataset from the output
        /// directory of the original run).
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate sequences from a trained checkpoint.
    Sample {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Euler integration steps (forward passes are steps + 1).
        #[arg(long)]
        steps: Option<usize>,
        /// Velocity estimator: exact, stochastic, or topk.
        #[arg(long)]
        velocity: Option<String>,
        /// Posterior truncation width for the topk estimator.
        #[arg(long)]
        topk: Option<usize>,
        /// Softmax temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Number of sequences to generate.
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep sampler settings over a dataset and report accuracy.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Dataset file written by the train command (with its sidecar).
        #[arg(long, value_name = "FILE")]
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo tables and plots for the geometry claims.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<Config, CliError> {
    let mut cfg = Config::defaults();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env()?;
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.set("out", &out.display().to_string())?;
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    let common = match &cli.command {
        Cmd::Train { common, .. }
        | Cmd::Sample { common, .. }
        | Cmd::Eval { common, .. }
        | Cmd::Analyze { common } => common,
    };
    if common.single_thread {
        // Ignore the error: the pool can only be configured once per
        // process, and a second call means it is already set up.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match &cli.command {
        Cmd::Train { resume, common } => {
            let cfg = resolve(common)?;
            train::cmd_train(&cfg, resume.as_deref())
        }
        Cmd::Sample { checkpoint, steps, velocity, topk, temperature, count, common } => {
            let mut cfg = resolve(common)?;
            if let Some(v) = steps {
                cfg.set("sample.steps", &v.to_string())?;
            }
            if let Some(v) = velocity {
                cfg.set("sample.velocity", v)?;
            }
            if let Some(v) = topk {
                cfg.set("sample.topk", &v.to_string())?;
            }
            if let Some(v) = temperature {
                cfg.set("sample.temperature", &v.to_string())?;
            }
            if let Some(v) = count {
                cfg.set("sample.count", &v.to_string())?;
            }
            sample::cmd_sample(&cfg, checkpoint)
        }
        Cmd::Eval { checkpoint, dataset, common } => {
            let cfg = resolve(common)?;
            eval::cmd_eval(&cfg, checkpoint, dataset)
        }
        Cmd::Analyze { common } => {
            let cfg = resolve(common)?;
            analyze::cmd_analyze(&cfg)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
