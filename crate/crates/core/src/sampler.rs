//! Sampling: integrate the model's posterior-weighted velocity field on the
//! sphere from uniform noise at t = 0 to a decoded sequence at t = 1.
//!
//! Per step: one forward pass, temperature scaling, a velocity estimate per
//! free position (exact marginal, one stochastic draw, or top-k truncated),
//! then a geodesic Euler update whose step size comes from the schedule. A
//! final forward pass decodes tokens by argmax, so a run with N steps costs
//! N + 1 forward evaluations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{argmax_lowest_index, Codebook, CodebookError};
use crate::denoiser::math::SeqMat;
use crate::denoiser::{Denoiser, DenoiserError, ParameterSet};
use crate::geometry::{
    exp_map, sample_uniform, stable_angle, GeometryError, SpherePoint, TangentVector,
};
use crate::schedule::{euler_step_sizes, Schedule, ScheduleError};

/// Posterior mass below this threshold is ignored by the velocity sums.
pub const EPS_PROB: f64 = 1e-12;
/// Angular margin from pi inside which a codebook row counts as antipodal.
pub const ANTIPODAL_GUARD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {reason}")]
    InvalidConfig { reason: String },
    #[error("step budget must be at least 1")]
    StepBudgetZero,
    #[error("non-finite logits at position {position}")]
    NonFiniteLogits { position: usize },
    #[error("probabilities sum to {sum}, expected 1")]
    ProbsNotNormalized { sum: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] DenoiserError),
}

/// How the per-position velocity marginalizes the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Velocity {
    /// Full posterior-weighted average of log maps.
    Exact,
    /// Log map toward a single categorical draw.
    Stochastic,
    /// Posterior truncated to the k highest logits, then averaged.
    TopK { k: usize },
}

/// Known tokens pinned during generation. `clean[l]` marks position `l` as
/// given; its latent never moves and its output token is `tokens[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub tokens: Vec<usize>,
    pub clean: Vec<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub velocity: Velocity,
    pub temperature: f64,
    pub schedule: Schedule,
    /// Sequence length; must match the conditioning length when present.
    pub length: usize,
    pub conditioning: Option<Conditioning>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self, vocab: usize) -> Result<(), SamplerError> {
        if self.steps < 1 {
            return Err(SamplerError::StepBudgetZero);
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SamplerError::InvalidConfig {
                reason: format!("temperature must be finite and > 0, got {}", self.temperature),
            });
        }
        if self.length == 0 {
            return Err(SamplerError::InvalidConfig { reason: "length must be positive".into() });
        }
        if let Velocity::TopK { k } = self.velocity {
            if k < 1 || k > vocab {
                return Err(SamplerError::InvalidConfig {
                    reason: format!("top-k width {k} outside [1, {vocab}]"),
                });
            }
        }
        if let Some(cond) = &self.conditioning {
            if cond.tokens.len() != self.length || cond.clean.len() != self.length {
                return Err(SamplerError::InvalidConfig {
                    reason: format!(
                        "conditioning lengths {}/{} do not match length {}",
                        cond.tokens.len(),
                        cond.clean.len(),
                        self.length
                    ),
                });
            }
            for (&tok, &c) in cond.tokens.iter().zip(&cond.clean) {
                if c && tok >= vocab {
                    return Err(SamplerError::InvalidConfig {
                        reason: format!("conditioning token {tok} outside vocabulary {vocab}"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Anything that maps latents at time t to posterior logits.
pub trait PosteriorModel {
    fn vocab_size(&self) -> usize;
    fn dim(&self) -> usize;
    fn logits(&self, z: &SeqMat, t: f64) -> Result<SeqMat, SamplerError>;
}

/// The trained denoiser viewed as a posterior model.
pub struct DenoiserPosterior<'a> {
    pub model: &'a Denoiser,
    pub params: &'a ParameterSet,
}

impl PosteriorModel for DenoiserPosterior<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn dim(&self) -> usize {
        self.model.config().dim
    }

    fn logits(&self, z: &SeqMat, t: f64) -> Result<SeqMat, SamplerError> {
        Ok(self.model.forward(self.params, z, t)?)
    }
}

/// softmax(row / t), numerically stabilized; sums to 1 within 1e-12.
pub fn apply_temperature(row: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let inv = 1.0 / temperature;
    let mx = row.iter().map(|x| x * inv).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|x| (x * inv - mx).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Shannon entropy in nats, with 0 ln 0 = 0.
pub fn posterior_entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// What to do when a token with non-negligible mass sits antipodal to the
/// latent: the strict API errors; the sampling loop drops the contribution,
/// renormalizes the kept mass, and counts the event.
enum AntipodalPolicy<'a> {
    Strict,
    Drop(&'a mut u64),
}

/// Posterior-weighted sum of log maps in fused form:
/// `sum_v p_v c_v e_v  -  (sum_v p_v c_v cos w_v) z` with `c_v = w_v / sin w_v`.
fn marginal_from_probs(
    z: &[f64],
    probs: &[f64],
    rows: &[f64],
    policy: &mut AntipodalPolicy,
) -> Result<Vec<f64>, SamplerError> {
    let dim = z.len();
    let mut acc = vec![0.0; dim];
    let mut z_coeff = 0.0;
    let mut kept = 0.0;
    let mut dropped_here = false;
    for (v, &p) in probs.iter().enumerate() {
        if p <= EPS_PROB {
            continue;
        }
        let e = &rows[v * dim..(v + 1) * dim];
        let (w, cos_w, sin_w) = stable_angle(z, e);
        if w >= std::f64::consts::PI - ANTIPODAL_GUARD {
            match policy {
                AntipodalPolicy::Strict => {
                    return Err(GeometryError::AntipodalPoints { angle: w }.into());
                }
                AntipodalPolicy::Drop(count) => {
                    **count += 1;
                    dropped_here = true;
                    continue;
                }
            }
        }
        kept += p;
        let c = if w < 1e-8 { 1.0 } else { w / sin_w };
        let pc = p * c;
        for (a, &ei) in acc.iter_mut().zip(e) {
            *a += pc * ei;
        }
        z_coeff += pc * cos_w;
    }
    if dropped_here && kept > 0.0 {
        let scale = 1.0 / kept;
        for a in &mut acc {
            *a *= scale;
        }
        z_coeff *= scale;
    }
    for (a, &zi) in acc.iter_mut().zip(z) {
        *a -= z_coeff * zi;
    }
    Ok(acc)
}

fn check_probs(probs: &[f64], vocab: usize) -> Result<(), SamplerError> {
    if probs.len() != vocab {
        return Err(SamplerError::InvalidConfig {
            reason: format!("probability row length {} vs vocabulary {vocab}", probs.len()),
        });
    }
    let sum: f64 = probs.iter().sum();
    if !(sum.is_finite() && (sum - 1.0).abs() <= 1e-9) {
        return Err(SamplerError::ProbsNotNormalized { sum });
    }
    Ok(())
}

/// Full marginal velocity `sum_v p_v log_z(e_v)`. Errors on any antipodal
/// token with mass above `EPS_PROB`.
pub fn exact_velocity(
    z: &SpherePoint,
    probs: &[f64],
    codebook: &Codebook,
) -> Result<TangentVector, SamplerError> {
    check_probs(probs, codebook.vocab_size())?;
    let rows = codebook.normalized_rows()?;
    let vec = marginal_from_probs(z.coords(), probs, &rows, &mut AntipodalPolicy::Strict)?;
    Ok(TangentVector::new(z.clone(), vec)?)
}

/// Velocity toward one categorical draw from the posterior.
pub fn stochastic_velocity<R: Rng + ?Sized>(
    z: &SpherePoint,
    probs: &[f64],
    codebook: &Codebook,
    rng: &mut R,
) -> Result<TangentVector, SamplerError> {
    check_probs(probs, codebook.vocab_size())?;
    let rows = codebook.normalized_rows()?;
    let draw = categorical_draw(probs, rng);
    let mut onehot = vec![0.0; probs.len()];
    onehot[draw] = 1.0;
    let vec = marginal_from_probs(z.coords(), &onehot, &rows, &mut AntipodalPolicy::Strict)?;
    Ok(TangentVector::new(z.clone(), vec)?)
}

/// Velocity over the k highest logits (ties keep the lower index), softmax
/// renormalized over the truncated set.
pub fn topk_velocity(
    z: &SpherePoint,
    logits: &[f64],
    k: usize,
    codebook: &Codebook,
) -> Result<TangentVector, SamplerError> {
    let vocab = codebook.vocab_size();
    if logits.len() != vocab {
        return Err(SamplerError::InvalidConfig {
            reason: format!("logit row length {} vs vocabulary {vocab}", logits.len()),
        });
    }
    if k < 1 || k > vocab {
        return Err(SamplerError::InvalidConfig {
            reason: format!("top-k width {k} outside [1, {vocab}]"),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(SamplerError::NonFiniteLogits { position: 0 });
    }
    let rows = codebook.normalized_rows()?;
    let probs = topk_probs(logits, k);
    let vec = marginal_from_probs(z.coords(), &probs, &rows, &mut AntipodalPolicy::Strict)?;
    Ok(TangentVector::new(z.clone(), vec)?)
}

/// Softmax restricted to the k largest entries (ties by lower index); the
/// rest get exactly zero.
fn topk_probs(logits: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        logits[b].partial_cmp(&logits[a]).expect("finite logits").then(a.cmp(&b))
    });
    let selected = &order[..k];
    let mx = selected.iter().map(|&v| logits[v]).fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for &v in selected {
        let e = (logits[v] - mx).exp();
        probs[v] = e;
        sum += e;
    }
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

fn categorical_draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let target = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (v, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last_positive = v;
        cum += p;
        if cum >= target {
            return v;
        }
    }
    last_positive
}

/// Everything a caller needs to inspect or persist about one generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleReport {
    pub tokens: Vec<usize>,
    /// Mean posterior entropy over free positions, one entry per Euler step.
    pub step_entropy: Vec<f64>,
    /// Forward evaluations spent: steps + 1 for the final decode.
    pub nfe: usize,
    pub seed: u64,
    /// Antipodal contributions dropped by the guard across the whole run.
    pub antipodal_dropped: u64,
    /// Largest |norm - 1| observed on any latent after any step.
    pub max_norm_drift: f64,
    pub config: SamplerConfig,
}

/// Runs the geodesic Euler sampler and decodes with a final forward pass.
pub fn sample<M: PosteriorModel>(
    model: &M,
    codebook: &Codebook,
    cfg: &SamplerConfig,
) -> Result<SampleReport, SamplerError> {
    let vocab = model.vocab_size();
    let dim = model.dim();
    cfg.validate(vocab)?;
    if codebook.vocab_size() != vocab || codebook.dim() != dim {
        return Err(SamplerError::InvalidConfig {
            reason: format!(
                "codebook {}x{} does not match model {}x{}",
                codebook.vocab_size(),
                codebook.dim(),
                vocab,
                dim
            ),
        });
    }
    let length = cfg.length;
    let clean: Vec<bool> = match &cfg.conditioning {
        Some(c) => c.clean.clone(),
        None => vec![false; length],
    };
    let n_steps = cfg.steps;
    let sizes = euler_step_sizes(&cfg.schedule, n_steps)?;
    let rows = codebook.normalized_rows()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut latents: Vec<SpherePoint> = Vec::with_capacity(length);
    for l in 0..length {
        if clean[l] {
            let tok = cfg.conditioning.as_ref().expect("clean implies conditioning").tokens[l];
            latents.push(codebook.embed(tok)?);
        } else {
            latents.push(sample_uniform(dim, &mut rng));
        }
    }

    let inv_t = 1.0 / cfg.temperature;
    let mut step_entropy = Vec::with_capacity(n_steps);
    let mut dropped = 0u64;
    let mut max_drift = 0.0f64;
    let mut z_mat = SeqMat::zeros(length, dim);

    for (n, &s_n) in sizes.iter().enumerate() {
        let t_n = n as f64 / n_steps as f64;
        for (l, point) in latents.iter().enumerate() {
            z_mat.row_mut(l).copy_from_slice(point.coords());
        }
        let logits = model.logits(&z_mat, t_n)?;
        let mut ent_sum = 0.0;
        let mut free = 0usize;
        for l in 0..length {
            if clean[l] {
                continue;
            }
            let row = logits.row(l);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(SamplerError::NonFiniteLogits { position: l });
            }
            let scaled: Vec<f64> = row.iter().map(|x| x * inv_t).collect();
            let probs = apply_temperature(row, cfg.temperature);
            ent_sum += posterior_entropy(&probs);
            free += 1;

            let z = &latents[l];
            let vel = match cfg.velocity {
                Velocity::Exact => marginal_from_probs(
                    z.coords(),
                    &probs,
                    &rows,
                    &mut AntipodalPolicy::Drop(&mut dropped),
                )?,
                Velocity::Stochastic => {
                    let draw = categorical_draw(&probs, &mut rng);
                    let mut onehot = vec![0.0; vocab];
                    onehot[draw] = 1.0;
                    marginal_from_probs(
                        z.coords(),
                        &onehot,
                        &rows,
                        &mut AntipodalPolicy::Drop(&mut dropped),
                    )?
                }
                Velocity::TopK { k } => {
                    let probs_k = topk_probs(&scaled, k);
                    marginal_from_probs(
                        z.coords(),
                        &probs_k,
                        &rows,
                        &mut AntipodalPolicy::Drop(&mut dropped),
                    )?
                }
            };
            let step: Vec<f64> = vel.iter().map(|v| s_n * v).collect();
            let next = exp_map(z, &step)?;
            let norm: f64 = next.coords().iter().map(|x| x * x).sum::<f64>().sqrt();
            max_drift = max_drift.max((norm - 1.0).abs());
            latents[l] = next;
        }
        step_entropy.push(if free > 0 { ent_sum / free as f64 } else { 0.0 });
    }

    for (l, point) in latents.iter().enumerate() {
        z_mat.row_mut(l).copy_from_slice(point.coords());
    }
    let logits = model.logits(&z_mat, 1.0)?;
    let mut tokens = Vec::with_capacity(length);
    for l in 0..length {
        if clean[l] {
            tokens.push(cfg.conditioning.as_ref().expect("clean implies conditioning").tokens[l]);
        } else {
            let row = logits.row(l);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(SamplerError::NonFiniteLogits { position: l });
            }
            tokens.push(argmax_lowest_index(row)?);
        }
    }

    Ok(SampleReport {
        tokens,
        step_entropy,
        nfe: n_steps + 1,
        seed: cfg.seed,
        antipodal_dropped: dropped,
        max_norm_drift: max_drift,
        config: cfg.clone(),
    })
}
