//! Library half of the `sphereflow` binary: config resolution and the four
//! command implementations, kept out of `main.rs` so they can be unit
//! tested with stub models.

pub mod analyze;
pub mod config;
pub mod eval;
pub mod plot;
pub mod sample;
pub mod train;

use std::path::Path;

use thiserror::Error;

use sphereflow_core::checkpoint::CheckpointError;
use sphereflow_core::denoiser::{Arch, Denoiser, DenoiserConfig};
use sphereflow_core::sampler::{SamplerError, Velocity};
use sphereflow_core::schedule::{Schedule, ScheduleError};
use sphereflow_core::tasks::TaskError;
use sphereflow_core::trainer::{LossMask, TrainConfig, TrainerError};

use config::Config;

/// Errors are split by exit code: bad input (2) versus a failure while
/// computing or writing results (3).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

pub fn trainer_err(e: TrainerError) -> CliError {
    match e {
        TrainerError::NonFiniteLoss { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn sampler_err(e: SamplerError) -> CliError {
    match e {
        SamplerError::InvalidConfig { .. } | SamplerError::StepBudgetZero => {
            CliError::Config(e.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    }
}

pub fn task_err(e: TaskError) -> CliError {
    match e {
        TaskError::Io(_) => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn schedule_err(e: ScheduleError) -> CliError {
    match e {
        ScheduleError::NonFiniteLoss { .. } => CliError::Runtime(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn ckpt_read_err(path: &Path, e: CheckpointError) -> CliError {
    CliError::Config(format!("cannot load checkpoint {}: {e}", path.display()))
}

pub fn io_err(what: &str, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{what}: {e}"))
}

/// SplitMix64 round, used to derive independent seeds from (seed, index)
/// pairs without consuming RNG state.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E3779B97F4A7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

pub fn build_schedule(cfg: &Config) -> Result<Schedule, CliError> {
    let a_max = cfg.f64_("schedule.a_max");
    let sched = match cfg.str_("schedule.kind") {
        "linear" => Schedule::linear(a_max),
        _ => Schedule::cosine2(a_max),
    };
    sched.map_err(schedule_err)
}

pub fn build_model_config(cfg: &Config, vocab: usize) -> Result<DenoiserConfig, CliError> {
    let arch = match cfg.str_("model.arch") {
        "standard" => Arch::Standard,
        _ => Arch::SArch,
    };
    let mc = DenoiserConfig {
        arch,
        dim: cfg.usize_("model.dim"),
        layers: cfg.usize_("model.layers"),
        heads: cfg.usize_("model.heads"),
        cond_dim: cfg.usize_("model.cond_dim"),
        vocab_size: vocab,
        dropout: cfg.f64_("model.dropout"),
        gamma_init: 0.05,
        s_qk_init: 1.0,
        s_z_init: 1.0,
    };
    Denoiser::new(mc.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(mc)
}

pub fn build_train_config(cfg: &Config) -> Result<TrainConfig, CliError> {
    let mut tc = TrainConfig::new(build_schedule(cfg)?);
    tc.batch_size = cfg.usize_("train.batch_size");
    tc.steps = cfg.usize_("train.steps");
    tc.lr = cfg.f64_("train.lr");
    tc.beta1 = cfg.f64_("train.beta1");
    tc.beta2 = cfg.f64_("train.beta2");
    tc.weight_decay = cfg.f64_("train.weight_decay");
    tc.ema_rate = cfg.f64_("train.ema_rate");
    tc.loss_mask = match cfg.str_("train.loss_mask") {
        "all" => LossMask::All,
        _ => LossMask::ExcludeClean,
    };
    if cfg.bool_("refit.enabled") {
        tc.refit = Some(sphereflow_core::schedule::RefitParams {
            interval: cfg.usize_("refit.interval"),
            warmup: cfg.usize_("refit.warmup"),
            ema_beta: cfg.f64_("refit.ema_beta"),
            floor_mu: cfg.f64_("refit.floor_mu"),
            ridge_lambda: cfg.f64_("refit.ridge_lambda"),
            grid_size: cfg.usize_("refit.grid_size"),
            spline_knots: cfg.usize_("refit.spline_knots"),
        });
    }
    tc.validate().map_err(trainer_err)?;
    Ok(tc)
}

/// Maps the velocity name plus the top-k width onto the sampler enum. The
/// width is validated even when unused so an explicit `--topk 0` always
/// fails fast.
pub fn parse_velocity(name: &str, topk: usize) -> Result<Velocity, CliError> {
    if topk == 0 {
        return Err(CliError::Config("top-k width must be at least 1".into()));
    }
    Ok(match name {
        "exact" => Velocity::Exact,
        "stochastic" => Velocity::Stochastic,
        _ => Velocity::TopK { k: topk },
    })
}

pub fn velocity_name(v: Velocity) -> String {
    match v {
        Velocity::Exact => "exact".into(),
        Velocity::Stochastic => "stochastic".into(),
        Velocity::TopK { k } => format!("topk{k}"),
    }
}
