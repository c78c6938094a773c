//! Training loop: noisy-latent construction, masked cross-entropy, batched
//! gradients, Adam with decoupled weight decay, and EMA shadows for both the
//! denoiser parameters and the embedding codebook.
//!
//! Determinism contract: all randomness for a step (per-sequence times,
//! noise latents, dropout seeds) is drawn sequentially from the state RNG
//! before any parallel work starts, and per-sequence gradients are folded in
//! batch order. The result is bitwise independent of the rayon thread count.
//!
//! Precision contract: denoiser parameters, their Adam moments, and their
//! EMA shadow are rounded to the nearest f32 after every update so a 32-bit
//! checkpoint restores the exact working state. The codebook and its
//! optimizer/EMA state stay in f64 throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, CodebookError};
use crate::denoiser::math::{axpy, SeqMat};
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserError, ParameterSet};
use crate::geometry::{sample_uniform, slerp, slerp_vjp, GeometryError, SpherePoint};
use crate::schedule::{
    adaptive_refit, LossBuffer, RefitParams, RefitState, Schedule, ScheduleError,
};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid train config: {reason}")]
    InvalidConfig { reason: String },
    #[error("shape mismatch: {reason}")]
    ShapeMismatch { reason: String },
    #[error("token {token} at position {index} outside vocabulary of size {vocab}")]
    TokenOutOfRange { index: usize, token: usize, vocab: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Which positions contribute to the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Only noised positions are scored; conditioning positions are free.
    ExcludeClean,
    /// Every position is scored, conditioning included.
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_rate: f64,
    pub schedule: Schedule,
    pub refit: Option<RefitParams>,
    /// Renormalize codebook rows after each optimizer step. Off by default:
    /// the embedding lookup normalizes anyway and the raw-row norm growth is
    /// a useful training signal.
    pub reproject_after_step: bool,
    pub loss_mask: LossMask,
}

impl TrainConfig {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            batch_size: 32,
            steps: 1000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            ema_rate: 0.9999,
            schedule,
            refit: None,
            reproject_after_step: false,
            loss_mask: LossMask::ExcludeClean,
        }
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |reason: String| Err(TrainerError::InvalidConfig { reason });
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} / {}", self.beta1, self.beta2));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!("ema_rate must lie in [0, 1), got {}", self.ema_rate));
        }
        if let Some(rp) = &self.refit {
            rp.validate()?;
        }
        Ok(())
    }
}

/// One training example: token ids plus a conditioning mask. `clean[l]`
/// marks position `l` as given (pinned to its embedding, never noised).
#[derive(Debug, Clone)]
pub struct TrainSequence {
    pub tokens: Vec<usize>,
    pub clean: Vec<bool>,
}

/// Everything that evolves during training. Checkpointing serializes this
/// struct; `params`, `moments_*`, and `ema` are on the f32 grid.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterSet,
    pub codebook: Codebook,
    pub moments_m: Vec<Vec<f64>>,
    pub moments_v: Vec<Vec<f64>>,
    pub codebook_m: Vec<f64>,
    pub codebook_v: Vec<f64>,
    pub ema: ParameterSet,
    pub ema_codebook: Codebook,
    pub step: u64,
    pub schedule: Schedule,
    pub buffer: LossBuffer,
    pub refit_state: RefitState,
    pub recorded: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// EMA shadow (denoiser + codebook) for evaluation; training state is
    /// untouched.
    pub fn ema_weights(&self) -> (&ParameterSet, &Codebook) {
        (&self.ema, &self.ema_codebook)
    }
}

/// Per-sequence randomness, drawn from the master RNG before parallel work.
#[derive(Debug, Clone)]
pub struct SeqDraw {
    pub t: f64,
    pub z0: Vec<SpherePoint>,
    pub dropout_seed: u64,
}

/// Summary row for the metrics stream.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: u64,
    pub mean_t: f64,
    pub loss: f64,
    pub refit_applied: bool,
}

/// Batch-averaged loss and gradients, in parameter layout order plus a flat
/// `[vocab * dim]` block for the raw codebook.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub param_grads: Vec<Vec<f64>>,
    pub codebook_grads: Vec<f64>,
    pub loss: f64,
    pub per_seq: Vec<(f64, f64)>,
}

/// Interpolates each position toward its token embedding by the schedule's
/// noise level at `t`. Conditioning positions are pinned to the embedding
/// exactly; all others start from the supplied uniform latents.
pub fn make_noisy_latent(
    tokens: &[usize],
    clean: &[bool],
    t: f64,
    z0: &[SpherePoint],
    codebook: &Codebook,
    schedule: &Schedule,
) -> Result<SeqMat, TrainerError> {
    if tokens.len() != clean.len() || tokens.len() != z0.len() {
        return Err(TrainerError::ShapeMismatch {
            reason: format!(
                "tokens/clean/z0 lengths differ: {} / {} / {}",
                tokens.len(),
                clean.len(),
                z0.len()
            ),
        });
    }
    if tokens.is_empty() {
        return Err(TrainerError::ShapeMismatch { reason: "empty sequence".into() });
    }
    let alpha = schedule.alpha(t)?;
    let dim = codebook.dim();
    let mut out = SeqMat::zeros(tokens.len(), dim);
    for l in 0..tokens.len() {
        let e = codebook.embed(tokens[l])?;
        let point = if clean[l] { e } else { slerp(&z0[l], &e, alpha)? };
        out.row_mut(l).copy_from_slice(point.coords());
    }
    Ok(out)
}

/// Masked token cross-entropy, summed over scored positions, plus its
/// gradient w.r.t. the logits (softmax minus one-hot on scored rows, zero
/// elsewhere). Batch averaging is the caller's job.
pub fn ce_loss(
    logits: &SeqMat,
    tokens: &[usize],
    mask: &[bool],
) -> Result<(f64, SeqMat), TrainerError> {
    if logits.rows != tokens.len() || tokens.len() != mask.len() {
        return Err(TrainerError::ShapeMismatch {
            reason: format!(
                "logits rows {} vs tokens {} vs mask {}",
                logits.rows,
                tokens.len(),
                mask.len()
            ),
        });
    }
    let vocab = logits.cols;
    let mut dlogits = SeqMat::zeros(logits.rows, vocab);
    let mut loss = 0.0;
    for l in 0..logits.rows {
        if !mask[l] {
            continue;
        }
        let target = tokens[l];
        if target >= vocab {
            return Err(TrainerError::TokenOutOfRange { index: l, token: target, vocab });
        }
        let row = logits.row(l);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum_exp = 0.0;
        for &x in row {
            sum_exp += (x - mx).exp();
        }
        loss += mx + sum_exp.ln() - row[target];
        let drow = dlogits.row_mut(l);
        for (dv, &x) in drow.iter_mut().zip(row) {
            *dv = (x - mx).exp() / sum_exp;
        }
        drow[target] -= 1.0;
    }
    Ok((loss, dlogits))
}

pub struct Trainer {
    model: Denoiser,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: DenoiserConfig, cfg: TrainConfig) -> Result<Self, TrainerError> {
        cfg.validate()?;
        Ok(Self { model: Denoiser::new(model_cfg)?, cfg })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Fresh training state: codebook then denoiser parameters drawn from a
    /// seeded RNG, parameters snapped to the f32 grid, EMA shadows starting
    /// as copies, zero moments.
    pub fn init_state(&self, seed: u64) -> TrainState {
        let mcfg = self.model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codebook = Codebook::init(mcfg.vocab_size, mcfg.dim, &mut rng);
        let mut params = self.model.init_params(&mut rng);
        params.quantize_to_f32();
        let moments_m = params.grads_like();
        let moments_v = params.grads_like();
        let cb_len = codebook.raw().len();
        let buffer_cap = match &self.cfg.refit {
            Some(rp) => (2 * rp.min_samples()).max(rp.interval * self.cfg.batch_size),
            None => 1024.max(self.cfg.batch_size),
        };
        let refit_state = RefitState::new(
            self.cfg.refit.as_ref().map(|rp| rp.grid_size).unwrap_or(RefitParams::default().grid_size),
        );
        TrainState {
            ema: params.clone(),
            ema_codebook: codebook.clone(),
            params,
            codebook,
            moments_m,
            moments_v,
            codebook_m: vec![0.0; cb_len],
            codebook_v: vec![0.0; cb_len],
            step: 0,
            schedule: self.cfg.schedule.clone(),
            buffer: LossBuffer::new(buffer_cap),
            refit_state,
            recorded: 0,
            rng,
        }
    }

    fn validate_batch(&self, batch: &[TrainSequence]) -> Result<(), TrainerError> {
        if batch.is_empty() {
            return Err(TrainerError::EmptyBatch);
        }
        let vocab = self.model.config().vocab_size;
        for seq in batch {
            if seq.tokens.is_empty() {
                return Err(TrainerError::ShapeMismatch { reason: "empty sequence".into() });
            }
            if seq.tokens.len() != seq.clean.len() {
                return Err(TrainerError::ShapeMismatch {
                    reason: format!(
                        "tokens length {} vs clean mask length {}",
                        seq.tokens.len(),
                        seq.clean.len()
                    ),
                });
            }
            for (i, &tok) in seq.tokens.iter().enumerate() {
                if tok >= vocab {
                    return Err(TrainerError::TokenOutOfRange { index: i, token: tok, vocab });
                }
            }
        }
        Ok(())
    }

    /// Batch loss and gradients for fixed randomness. Sequences are
    /// processed in parallel and folded in order, so the result does not
    /// depend on thread scheduling.
    pub fn compute_batch(
        &self,
        params: &ParameterSet,
        codebook: &Codebook,
        schedule: &Schedule,
        batch: &[TrainSequence],
        draws: &[SeqDraw],
    ) -> Result<BatchGrads, TrainerError> {
        self.validate_batch(batch)?;
        if draws.len() != batch.len() {
            return Err(TrainerError::ShapeMismatch {
                reason: format!("draws {} vs batch {}", draws.len(), batch.len()),
            });
        }
        let dim = codebook.dim();
        let vocab = codebook.vocab_size();

        struct SeqOut {
            param_grads: Vec<Vec<f64>>,
            cb_grads: Vec<f64>,
            loss_sum: f64,
            t: f64,
        }

        let outs: Vec<SeqOut> = (0..batch.len())
            .into_par_iter()
            .map(|i| -> Result<SeqOut, TrainerError> {
                let seq = &batch[i];
                let draw = &draws[i];
                let alpha = schedule.alpha(draw.t)?;
                let z = make_noisy_latent(
                    &seq.tokens,
                    &seq.clean,
                    draw.t,
                    &draw.z0,
                    codebook,
                    schedule,
                )?;
                let (logits, cache) =
                    self.model.forward_train(params, &z, draw.t, draw.dropout_seed)?;
                let mask: Vec<bool> = match self.cfg.loss_mask {
                    LossMask::ExcludeClean => seq.clean.iter().map(|&c| !c).collect(),
                    LossMask::All => vec![true; seq.tokens.len()],
                };
                let (loss_sum, dlogits) = ce_loss(&logits, &seq.tokens, &mask)?;
                let (param_grads, dz) = self.model.backward(params, &cache, &dlogits)?;
                let mut cb_grads = vec![0.0; vocab * dim];
                for l in 0..seq.tokens.len() {
                    let v = seq.tokens[l];
                    let upstream = dz.row(l);
                    let d_embed: Vec<f64> = if seq.clean[l] {
                        upstream.to_vec()
                    } else {
                        let e = codebook.embed(v)?;
                        let (_, dq) = slerp_vjp(&draw.z0[l], &e, alpha, upstream)?;
                        dq
                    };
                    let d_raw = codebook.normalize_vjp(v, &d_embed)?;
                    axpy(&mut cb_grads[v * dim..(v + 1) * dim], 1.0, &d_raw);
                }
                Ok(SeqOut { param_grads, cb_grads, loss_sum, t: draw.t })
            })
            .collect::<Result<_, _>>()?;

        let inv_b = 1.0 / batch.len() as f64;
        let mut param_grads = params.grads_like();
        let mut codebook_grads = vec![0.0; vocab * dim];
        let mut loss = 0.0;
        let mut per_seq = Vec::with_capacity(outs.len());
        for out in &outs {
            for (acc, g) in param_grads.iter_mut().zip(&out.param_grads) {
                axpy(acc, 1.0, g);
            }
            axpy(&mut codebook_grads, 1.0, &out.cb_grads);
            loss += out.loss_sum;
            per_seq.push((out.t, out.loss_sum));
        }
        for g in &mut param_grads {
            for x in g.iter_mut() {
                *x *= inv_b;
            }
        }
        for x in &mut codebook_grads {
            *x *= inv_b;
        }
        loss *= inv_b;
        Ok(BatchGrads { param_grads, codebook_grads, loss, per_seq })
    }

    /// One optimizer step. Draws all randomness sequentially, computes
    /// batch gradients in parallel, applies bias-corrected Adam with
    /// decoupled weight decay, updates the EMA shadows, records per-sequence
    /// (t, loss) pairs, and runs a schedule refit when due.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        batch: &[TrainSequence],
    ) -> Result<StepRecord, TrainerError> {
        self.validate_batch(batch)?;
        let dim = self.model.config().dim;
        let draws: Vec<SeqDraw> = batch
            .iter()
            .map(|seq| {
                let t = state.rng.gen::<f64>();
                let z0 =
                    (0..seq.tokens.len()).map(|_| sample_uniform(dim, &mut state.rng)).collect();
                let dropout_seed = state.rng.gen::<u64>();
                SeqDraw { t, z0, dropout_seed }
            })
            .collect();

        let grads =
            self.compute_batch(&state.params, &state.codebook, &state.schedule, batch, &draws)?;
        if !grads.loss.is_finite() {
            return Err(TrainerError::NonFiniteLoss { step: state.step, loss: grads.loss });
        }

        let k = state.step + 1;
        for ((tensor, g), (m, v)) in state
            .params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.param_grads)
            .zip(state.moments_m.iter_mut().zip(state.moments_v.iter_mut()))
        {
            adam_update(&mut tensor.data, g, m, v, k, &self.cfg, true);
        }
        adam_update(
            state.codebook.raw_mut(),
            &grads.codebook_grads,
            &mut state.codebook_m,
            &mut state.codebook_v,
            k,
            &self.cfg,
            false,
        );
        if self.cfg.reproject_after_step {
            state.codebook.reproject()?;
        }

        let e = self.cfg.ema_rate;
        for (shadow, tensor) in state.ema.tensors_mut().iter_mut().zip(state.params.tensors()) {
            ema_update(&mut shadow.data, &tensor.data, e, true);
        }
        {
            let current = state.codebook.raw().to_vec();
            ema_update(state.ema_codebook.raw_mut(), &current, e, false);
        }

        let mut mean_t = 0.0;
        for &(t, loss_sum) in &grads.per_seq {
            state.buffer.record(t, loss_sum)?;
            state.recorded += 1;
            mean_t += t;
        }
        mean_t /= grads.per_seq.len() as f64;

        state.step = k;
        let mut refit_applied = false;
        if let Some(rp) = &self.cfg.refit {
            if k >= rp.warmup as u64 && (k - rp.warmup as u64) % rp.interval as u64 == 0 {
                match adaptive_refit(&state.buffer, &self.cfg.schedule, rp, &mut state.refit_state)
                {
                    Ok(new_schedule) => {
                        state.schedule = new_schedule;
                        refit_applied = true;
                    }
                    Err(ScheduleError::InsufficientData { .. }) => {}
                    Err(err) => return Err(err.into()),
                }
            }
        }

        Ok(StepRecord { step: k, mean_t, loss: grads.loss, refit_applied })
    }
}

/// In-place Adam with bias correction and decoupled weight decay. With
/// `quantize`, moments and parameters are snapped to the f32 grid so the
/// 32-bit checkpoint resumes bit-exactly.
fn adam_update(
    data: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &TrainConfig,
    quantize: bool,
) {
    debug_assert_eq!(data.len(), grad.len());
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..data.len() {
        let g = grad[i];
        let mut mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        let mut vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        if quantize {
            mi = mi as f32 as f64;
            vi = vi as f32 as f64;
        }
        m[i] = mi;
        v[i] = vi;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let mut x = data[i] - cfg.lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + cfg.weight_decay * data[i]);
        if quantize {
            x = x as f32 as f64;
        }
        data[i] = x;
    }
}

/// `shadow += (1 - rate) * (value - shadow)`, the no-drift form: when the
/// shadow already equals the value the update is exactly zero.
fn ema_update(shadow: &mut [f64], value: &[f64], rate: f64, quantize: bool) {
    debug_assert_eq!(shadow.len(), value.len());
    for (s, &x) in shadow.iter_mut().zip(value) {
        let mut next = *s + (1.0 - rate) * (x - *s);
        if quantize {
            next = next as f32 as f64;
        }
        *s = next;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Arch;

    fn tiny_model(vocab: usize, dim: usize) -> DenoiserConfig {
        let mut cfg = DenoiserConfig::desk(Arch::Standard, vocab);
        cfg.dim = dim;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.cond_dim = 8;
        cfg
    }

    fn tiny_trainer(vocab: usize, dim: usize) -> Trainer {
        let schedule = Schedule::linear(1.0).unwrap();
        Trainer::new(tiny_model(vocab, dim), TrainConfig::new(schedule)).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize, vocab: usize) -> Vec<TrainSequence> {
        (0..n)
            .map(|_| TrainSequence {
                tokens: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
                clean: (0..len).map(|l| l < len / 4).collect(),
            })
            .collect()
    }

    #[test]
    fn noisy_latent_endpoints_and_pinning() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let codebook = Codebook::init(6, 8, &mut rng);
        let schedule = Schedule::linear(1.0).unwrap();
        let tokens = [1usize, 4, 0, 5];
        let clean = [true, false, false, false];
        let z0: Vec<SpherePoint> = (0..4).map(|_| sample_uniform(8, &mut rng)).collect();

        let z = make_noisy_latent(&tokens, &clean, 0.0, &z0, &codebook, &schedule).unwrap();
        for l in 1..4 {
            assert_eq!(z.row(l), z0[l].coords(), "alpha = 0 must reproduce the noise latent");
        }
        let z = make_noisy_latent(&tokens, &clean, 1.0, &z0, &codebook, &schedule).unwrap();
        for l in 0..4 {
            assert_eq!(z.row(l), codebook.embed(tokens[l]).unwrap().coords());
        }
        let z = make_noisy_latent(&tokens, &clean, 0.3, &z0, &codebook, &schedule).unwrap();
        assert_eq!(z.row(0), codebook.embed(1).unwrap().coords(), "clean position must stay pinned");
        assert_ne!(z.row(1), codebook.embed(4).unwrap().coords());
    }

    #[test]
    fn ce_loss_uniform_and_high_margin() {
        let logits = SeqMat::zeros(3, 12);
        let tokens = [0usize, 5, 11];
        let mask = [true, true, true];
        let (loss, dlogits) = ce_loss(&logits, &tokens, &mask).unwrap();
        assert!((loss / 3.0 - 2.4849066497880004).abs() < 1e-12);
        // Gradient rows of scored positions sum to zero (softmax minus
        // one-hot), and the target coordinate is negative.
        for l in 0..3 {
            let row = dlogits.row(l);
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            assert!(row[tokens[l]] < 0.0);
        }

        let mut sharp = SeqMat::zeros(2, 5);
        sharp.row_mut(0)[2] = 20.0;
        sharp.row_mut(1)[0] = 20.0;
        let (loss, _) = ce_loss(&sharp, &[2, 0], &[true, true]).unwrap();
        assert!(loss / 2.0 <= 1e-8, "margin-20 logits should give near-zero loss, got {loss}");
    }

    #[test]
    fn ce_loss_mask_and_errors() {
        let logits = SeqMat::zeros(2, 4);
        let (loss, dlogits) = ce_loss(&logits, &[1, 2], &[false, false]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dlogits.data.iter().all(|&x| x == 0.0));

        assert!(matches!(
            ce_loss(&logits, &[1, 9], &[true, true]),
            Err(TrainerError::TokenOutOfRange { index: 1, token: 9, vocab: 4 })
        ));
        assert!(matches!(
            ce_loss(&logits, &[1], &[true]),
            Err(TrainerError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn lr_zero_freezes_params_and_ema() {
        let schedule = Schedule::linear(1.0).unwrap();
        let mut cfg = TrainConfig::new(schedule);
        cfg.lr = 0.0;
        cfg.batch_size = 3;
        let trainer = Trainer::new(tiny_model(6, 16), cfg).unwrap();
        let mut state = trainer.init_state(11);
        let init_params = state.params.clone();
        let init_codebook = state.codebook.raw().to_vec();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let batch = random_batch(&mut rng, 3, 8, 6);
            trainer.train_step(&mut state, &batch).unwrap();
        }
        assert_eq!(state.params, init_params);
        assert_eq!(state.codebook.raw(), &init_codebook[..]);
        // Shadows started equal and the update is zero when they match.
        assert_eq!(state.ema, state.params);
        assert_eq!(state.ema_codebook.raw(), state.codebook.raw());
    }

    #[test]
    fn ema_rate_zero_tracks_params() {
        let schedule = Schedule::linear(1.0).unwrap();
        let mut cfg = TrainConfig::new(schedule);
        cfg.ema_rate = 0.0;
        cfg.lr = 1e-3;
        cfg.batch_size = 2;
        let trainer = Trainer::new(tiny_model(6, 16), cfg).unwrap();
        let mut state = trainer.init_state(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2 {
            let batch = random_batch(&mut rng, 2, 6, 6);
            trainer.train_step(&mut state, &batch).unwrap();
        }
        assert_eq!(state.ema, state.params);
        assert_eq!(state.ema_codebook.raw(), state.codebook.raw());
    }

    #[test]
    fn records_one_loss_sample_per_sequence() {
        let trainer = tiny_trainer(6, 16);
        let mut state = trainer.init_state(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let batch = random_batch(&mut rng, 3, 6, 6);
            trainer.train_step(&mut state, &batch).unwrap();
        }
        assert_eq!(state.recorded, 15);
        assert_eq!(state.buffer.len(), 15);
        assert_eq!(state.step, 5);
        for (t, loss) in state.buffer.samples() {
            assert!((0.0..1.0).contains(&t));
            assert!(loss.is_finite() && loss >= 0.0);
        }
    }

    #[test]
    fn ten_steps_are_bitwise_deterministic() {
        let run = || {
            let trainer = tiny_trainer(6, 16);
            let mut state = trainer.init_state(42);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut losses = Vec::new();
            for _ in 0..10 {
                let batch = random_batch(&mut rng, 4, 8, 6);
                losses.push(trainer.train_step(&mut state, &batch).unwrap().loss);
            }
            (state, losses)
        };
        let (a, losses_a) = run();
        let (b, losses_b) = run();
        assert_eq!(losses_a, losses_b);
        assert_eq!(a.params, b.params);
        assert_eq!(a.ema, b.ema);
        assert_eq!(a.codebook.raw(), b.codebook.raw());
        assert_eq!(a.moments_m, b.moments_m);
        assert_eq!(a.rng.get_word_pos(), b.rng.get_word_pos());
    }

    #[test]
    fn params_stay_on_f32_grid_and_codebook_stays_f64() {
        let trainer = tiny_trainer(6, 16);
        let mut state = trainer.init_state(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let batch = random_batch(&mut rng, 2, 6, 6);
            trainer.train_step(&mut state, &batch).unwrap();
        }
        for t in state.params.tensors() {
            for &x in &t.data {
                assert_eq!(x, x as f32 as f64);
            }
        }
        for t in state.ema.tensors() {
            for &x in &t.data {
                assert_eq!(x, x as f32 as f64);
            }
        }
        // The codebook should have drifted off the grid somewhere; it is
        // updated in full precision.
        let off_grid = state.codebook.raw().iter().any(|&x| x != x as f32 as f64);
        assert!(off_grid, "expected f64 codebook updates to leave the f32 grid");
    }

    #[test]
    fn codebook_gradients_match_finite_differences() {
        let trainer = tiny_trainer(5, 8);
        let state = trainer.init_state(21);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let batch = vec![TrainSequence {
            tokens: vec![0, 3, 2],
            clean: vec![true, false, false],
        }];
        let draws = vec![SeqDraw {
            t: 0.45,
            z0: (0..3).map(|_| sample_uniform(8, &mut rng)).collect(),
            dropout_seed: 0,
        }];
        let loss_for = |codebook: &Codebook| {
            trainer
                .compute_batch(&state.params, codebook, &state.schedule, &batch, &draws)
                .unwrap()
                .loss
        };
        let grads = trainer
            .compute_batch(&state.params, &state.codebook, &state.schedule, &batch, &draws)
            .unwrap();

        let h = 1e-5;
        let n = state.codebook.raw().len();
        for k in 0..20 {
            let i = (k * 7919) % n;
            let mut plus = state.codebook.clone();
            plus.raw_mut()[i] += h;
            let mut minus = state.codebook.clone();
            minus.raw_mut()[i] -= h;
            let fd = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
            let g = grads.codebook_grads[i];
            let err = (fd - g).abs();
            assert!(
                err <= 1e-6 || err / fd.abs().max(g.abs()) <= 1e-4,
                "codebook coord {i}: fd {fd} vs grad {g}"
            );
        }

        // Normalization makes the loss invariant to the row scale, so each
        // row's gradient is orthogonal to the row itself.
        let dim = 8;
        for v in 0..5 {
            let row = &state.codebook.raw()[v * dim..(v + 1) * dim];
            let g = &grads.codebook_grads[v * dim..(v + 1) * dim];
            let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if gnorm == 0.0 {
                continue;
            }
            let dot = row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            let rnorm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(
                (dot / (rnorm * gnorm)).abs() <= 1e-6,
                "row {v} gradient not orthogonal to the raw row"
            );
        }
    }

    #[test]
    fn copy_task_loss_decreases() {
        let schedule = Schedule::linear(1.0).unwrap();
        let mut cfg = TrainConfig::new(schedule);
        cfg.lr = 3e-3;
        cfg.batch_size = 8;
        let trainer = Trainer::new(tiny_model(6, 16), cfg).unwrap();
        let mut state = trainer.init_state(17);

        let mut rng = ChaCha8Rng::seed_from_u64(170);
        let mut losses = Vec::new();
        for _ in 0..300 {
            let batch: Vec<TrainSequence> = (0..8)
                .map(|_| {
                    let half: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
                    let mut tokens = half.clone();
                    tokens.extend_from_slice(&half);
                    let clean = vec![true, true, true, true, false, false, false, false];
                    TrainSequence { tokens, clean }
                })
                .collect();
            losses.push(trainer.train_step(&mut state, &batch).unwrap().loss);
        }
        let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = losses[250..].iter().sum::<f64>() / 50.0;
        assert!(
            tail < 0.8 * head,
            "copy-task loss should drop: first-50 mean {head}, last-50 mean {tail}"
        );
    }

    #[test]
    fn single_sequence_overfit_reaches_low_loss() {
        let schedule = Schedule::linear(1.0).unwrap();
        let mut cfg = TrainConfig::new(schedule);
        cfg.lr = 3e-3;
        cfg.batch_size = 4;
        let mcfg = DenoiserConfig::desk(Arch::Standard, 8);
        let trainer = Trainer::new(mcfg, cfg).unwrap();
        let mut state = trainer.init_state(23);

        // Puzzle-shaped sequence: 20-token given prefix, 19 scored targets.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tokens: Vec<usize> = (0..39).map(|_| rng.gen_range(0..8)).collect();
        let clean: Vec<bool> = (0..39).map(|l| l < 20).collect();
        // Overfit protocol: the batch repeats the one sequence, so each step
        // averages gradients over several independent noise draws.
        let batch =
            vec![TrainSequence { tokens: tokens.clone(), clean: clean.clone() }; 4];
        for _ in 0..500 {
            trainer.train_step(&mut state, &batch).unwrap();
        }

        // Judge the trained model on fresh noise draws across the whole
        // time range rather than on the last stochastic training sample.
        let mut eval_rng = ChaCha8Rng::seed_from_u64(990);
        let mask: Vec<bool> = clean.iter().map(|&c| !c).collect();
        let mut total = 0.0;
        let n_eval = 50;
        for i in 0..n_eval {
            let t = (i as f64 + 0.5) / n_eval as f64;
            let z0: Vec<SpherePoint> = (0..39).map(|_| sample_uniform(64, &mut eval_rng)).collect();
            let z = make_noisy_latent(&tokens, &clean, t, &z0, &state.codebook, &state.schedule)
                .unwrap();
            let logits = trainer.model().forward(&state.params, &z, t).unwrap();
            total += ce_loss(&logits, &tokens, &mask).unwrap().0;
        }
        let per_pos = total / (n_eval as f64 * 19.0);
        assert!(
            per_pos < 0.01,
            "single-sequence overfit should reach < 0.01 CE per scored position, got {per_pos}"
        );
    }

    #[test]
    fn refit_replaces_schedule_after_warmup() {
        let schedule = Schedule::linear(0.9).unwrap();
        let mut cfg = TrainConfig::new(schedule);
        cfg.batch_size = 8;
        cfg.refit = Some(RefitParams {
            interval: 5,
            warmup: 10,
            grid_size: 8,
            spline_knots: 4,
            ..RefitParams::default()
        });
        let trainer = Trainer::new(tiny_model(6, 16), cfg).unwrap();
        let mut state = trainer.init_state(6);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut any_refit = false;
        for _ in 0..20 {
            let batch = random_batch(&mut rng, 8, 6, 6);
            let rec = trainer.train_step(&mut state, &batch).unwrap();
            any_refit |= rec.refit_applied;
        }
        assert!(any_refit, "a refit should have fired past warmup");
        assert_eq!(state.schedule.kind(), crate::schedule::ScheduleKind::Adaptive);
        assert!((state.schedule.a_max() - 0.9).abs() < 1e-12);
        assert!(state.refit_state.refit_count() >= 1);
        // Noise levels drawn under the refit schedule still respect the cap.
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert!(state.schedule.alpha(t).unwrap() <= 0.9 + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configs_and_batches() {
        let schedule = Schedule::linear(1.0).unwrap();
        let mut cfg = TrainConfig::new(schedule.clone());
        cfg.lr = -1.0;
        assert!(matches!(
            Trainer::new(tiny_model(6, 16), cfg),
            Err(TrainerError::InvalidConfig { .. })
        ));
        let mut cfg = TrainConfig::new(schedule.clone());
        cfg.ema_rate = 1.0;
        assert!(matches!(
            Trainer::new(tiny_model(6, 16), cfg),
            Err(TrainerError::InvalidConfig { .. })
        ));
        let mut cfg = TrainConfig::new(schedule.clone());
        cfg.batch_size = 0;
        assert!(matches!(
            Trainer::new(tiny_model(6, 16), cfg),
            Err(TrainerError::InvalidConfig { .. })
        ));

        let trainer = tiny_trainer(6, 16);
        let mut state = trainer.init_state(0);
        assert!(matches!(trainer.train_step(&mut state, &[]), Err(TrainerError::EmptyBatch)));
        let bad_tok = vec![TrainSequence { tokens: vec![0, 9], clean: vec![false, false] }];
        assert!(matches!(
            trainer.train_step(&mut state, &bad_tok),
            Err(TrainerError::TokenOutOfRange { .. })
        ));
        let bad_mask = vec![TrainSequence { tokens: vec![0, 1], clean: vec![false] }];
        assert!(matches!(
            trainer.train_step(&mut state, &bad_mask),
            Err(TrainerError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_forward_aborts_step() {
        let trainer = tiny_trainer(6, 16);
        let mut state = trainer.init_state(14);
        state.params.get_mut("head.w_lm").unwrap().data[0] = f64::NAN;
        let batch = vec![TrainSequence { tokens: vec![1, 2], clean: vec![false, false] }];
        let err = trainer.train_step(&mut state, &batch).unwrap_err();
        assert!(matches!(err, TrainerError::Denoiser(DenoiserError::NonFiniteActivation { .. })));
        assert_eq!(state.step, 0, "failed step must not advance the counter");
    }
}
