//! Noise schedules alpha(t) on [0,1]: the closed-form linear and
//! cosine-squared families, range truncation driven by the critical noise
//! level of a random codebook, discrete Euler step sizes for the sampler,
//! and an adaptive schedule that is refit online from recorded (t, loss)
//! pairs.

mod pchip;
mod spline;

pub use pchip::MonotoneCubic;
pub use spline::RidgeSpline;

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("{name} out of range: {value}")]
    ParameterOutOfRange { name: &'static str, value: f64 },
    #[error("embedding dimension {dim} too small for this vocabulary/confidence (needs >= {required})")]
    DimensionTooSmall { dim: usize, required: usize },
    #[error("non-finite loss sample at t = {t}: {loss}")]
    NonFiniteLoss { t: f64, loss: f64 },
    #[error("not enough recorded loss samples: have {have}, need {need}")]
    InsufficientData { have: usize, need: usize },
}

/// Critical noise level: the smallest alpha at which the nearest codebook
/// row to the interpolant is the clean one with probability >= 1 - delta,
/// for a codebook of `vocab_size` uniform rows on S^{d-1}.
///
/// `(2/pi) * asin(sqrt(2 ln(2(|V|-1)/delta) / d))`; errors when the sphere
/// is too low-dimensional for the bound to bite (asin argument above one).
pub fn alpha_star(delta: f64, vocab_size: usize, dim: usize) -> Result<f64, ScheduleError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ScheduleError::ParameterOutOfRange { name: "delta", value: delta });
    }
    if vocab_size < 2 {
        return Err(ScheduleError::ParameterOutOfRange {
            name: "vocab_size",
            value: vocab_size as f64,
        });
    }
    if dim == 0 {
        return Err(ScheduleError::ParameterOutOfRange { name: "dim", value: 0.0 });
    }
    let log_term = 2.0 * ((2.0 * (vocab_size - 1) as f64) / delta).ln();
    let arg = log_term / dim as f64;
    if arg > 1.0 {
        return Err(ScheduleError::DimensionTooSmall { dim, required: log_term.ceil() as usize });
    }
    Ok(std::f64::consts::FRAC_2_PI * arg.sqrt().asin())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine2,
    Adaptive,
}

/// A noise schedule `alpha(t) = a_max * base(t)` with `base(0) = 0` and
/// `base(1) = 1`. `a_max < 1` truncates the range so training and sampling
/// never enter the regime where the interpolant has locked onto its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct Schedule {
    kind: ScheduleKind,
    a_max: f64,
    /// Normalized knots for the adaptive kind (base values in [0,1]).
    interp: Option<MonotoneCubic>,
}

/// Wire format: `{"kind": ..., "a_max": ..., "knots": [[t, base], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleSpec {
    kind: ScheduleKind,
    a_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    knots: Option<Vec<[f64; 2]>>,
}

impl From<Schedule> for ScheduleSpec {
    fn from(s: Schedule) -> Self {
        let knots = s.interp.as_ref().map(|m| {
            let (xs, ys) = m.nodes();
            xs.iter().zip(ys).map(|(&x, &y)| [x, y]).collect()
        });
        ScheduleSpec { kind: s.kind, a_max: s.a_max, knots }
    }
}

impl TryFrom<ScheduleSpec> for Schedule {
    type Error = ScheduleError;
    fn try_from(spec: ScheduleSpec) -> Result<Self, ScheduleError> {
        match spec.kind {
            ScheduleKind::Linear => Schedule::linear(spec.a_max),
            ScheduleKind::Cosine2 => Schedule::cosine2(spec.a_max),
            ScheduleKind::Adaptive => {
                let knots = spec.knots.ok_or(ScheduleError::ParameterOutOfRange {
                    name: "adaptive schedule without knots",
                    value: 0.0,
                })?;
                Schedule::adaptive(spec.a_max, knots.iter().map(|k| (k[0], k[1])).collect())
            }
        }
    }
}

fn check_a_max(a_max: f64) -> Result<(), ScheduleError> {
    if !(a_max > 0.0 && a_max <= 1.0) {
        return Err(ScheduleError::ParameterOutOfRange { name: "a_max", value: a_max });
    }
    Ok(())
}

impl Schedule {
    /// `alpha(t) = a_max * t`.
    pub fn linear(a_max: f64) -> Result<Self, ScheduleError> {
        check_a_max(a_max)?;
        Ok(Self { kind: ScheduleKind::Linear, a_max, interp: None })
    }

    /// `alpha(t) = a_max * sin^2(pi t / 2)`.
    pub fn cosine2(a_max: f64) -> Result<Self, ScheduleError> {
        check_a_max(a_max)?;
        Ok(Self { kind: ScheduleKind::Cosine2, a_max, interp: None })
    }

    /// Monotone interpolation of normalized `(t, base)` knots spanning
    /// exactly (0,0) to (1,1).
    pub fn adaptive(a_max: f64, knots: Vec<(f64, f64)>) -> Result<Self, ScheduleError> {
        check_a_max(a_max)?;
        if knots.len() < 2 {
            return Err(ScheduleError::ParameterOutOfRange {
                name: "adaptive knot count",
                value: knots.len() as f64,
            });
        }
        let first = knots[0];
        let last = *knots.last().unwrap();
        if first != (0.0, 0.0) || last != (1.0, 1.0) {
            return Err(ScheduleError::ParameterOutOfRange {
                name: "adaptive knot endpoints",
                value: last.1,
            });
        }
        for w in knots.windows(2) {
            if w[1].1 < w[0].1 {
                return Err(ScheduleError::ParameterOutOfRange {
                    name: "adaptive knot value (must be non-decreasing)",
                    value: w[1].1,
                });
            }
        }
        let xs: Vec<f64> = knots.iter().map(|k| k.0).collect();
        let ys: Vec<f64> = knots.iter().map(|k| k.1).collect();
        let interp = MonotoneCubic::new(xs, ys)?;
        Ok(Self { kind: ScheduleKind::Adaptive, a_max, interp: Some(interp) })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    /// The adaptive knots in normalized form, if any.
    pub fn knots(&self) -> Option<Vec<(f64, f64)>> {
        self.interp.as_ref().map(|m| {
            let (xs, ys) = m.nodes();
            xs.iter().zip(ys).map(|(&x, &y)| (x, y)).collect()
        })
    }

    /// Base profile before range scaling, guaranteed 0 at t=0 and 1 at t=1.
    fn base(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => t,
            ScheduleKind::Cosine2 => {
                if t == 1.0 {
                    1.0
                } else {
                    (std::f64::consts::FRAC_PI_2 * t).sin().powi(2)
                }
            }
            ScheduleKind::Adaptive => self.interp.as_ref().unwrap().value(t).clamp(0.0, 1.0),
        }
    }

    /// Noise level at time `t` in [0,1]. Endpoints are exact: `alpha(0) = 0`
    /// and `alpha(1) = a_max`.
    pub fn alpha(&self, t: f64) -> Result<f64, ScheduleError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ScheduleError::ParameterOutOfRange { name: "t", value: t });
        }
        Ok(self.a_max * self.base(t))
    }

    /// Same schedule with the range rescaled to `[0, a]`. Truncation is pure
    /// range scaling; the shape of the profile is untouched.
    pub fn truncate(&self, a: f64) -> Result<Self, ScheduleError> {
        check_a_max(a)?;
        let mut out = self.clone();
        out.a_max = a;
        Ok(out)
    }
}

/// Euler step sizes for the sampler on the uniform grid `t_n = n/N`:
/// `s_n = (alpha(t_{n+1}) - alpha(t_n)) / (1 - alpha(t_n))`, with `s_n = 1`
/// when `alpha(t_{n+1}) = 1` (the final contraction collapses onto the
/// predicted target). For the full-range linear schedule this reduces to
/// `s_n = 1/(N - n)` exactly.
pub fn euler_step_sizes(schedule: &Schedule, n_steps: usize) -> Result<Vec<f64>, ScheduleError> {
    if n_steps == 0 {
        return Err(ScheduleError::ParameterOutOfRange { name: "n_steps", value: 0.0 });
    }
    let n = n_steps as f64;
    let mut out = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let a0 = schedule.alpha(i as f64 / n)?;
        let a1 = schedule.alpha((i + 1) as f64 / n)?;
        let s = if a1 >= 1.0 { 1.0 } else { (a1 - a0) / (1.0 - a0) };
        out.push(s);
    }
    Ok(out)
}

/// Sliding window of per-sequence `(t, loss)` pairs feeding the adaptive
/// refit. Oldest entries are evicted once `capacity` is reached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBuffer {
    capacity: usize,
    data: VecDeque<(f64, f64)>,
}

impl LossBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "loss buffer needs room for at least one sample");
        Self { capacity, data: VecDeque::with_capacity(capacity) }
    }

    pub fn record(&mut self, t: f64, loss: f64) -> Result<(), ScheduleError> {
        if !loss.is_finite() {
            return Err(ScheduleError::NonFiniteLoss { t, loss });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(ScheduleError::ParameterOutOfRange { name: "t", value: t });
        }
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back((t, loss));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn samples(&self) -> Vec<(f64, f64)> {
        self.data.iter().copied().collect()
    }
}

/// Hyperparameters of the adaptive refit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefitParams {
    /// Steps between refits.
    pub interval: usize,
    /// Steps before the first refit.
    pub warmup: usize,
    /// EMA rate for the interpolated noise levels.
    pub ema_beta: f64,
    /// Uniform mixing floor on the sampling weights.
    pub floor_mu: f64,
    /// Ridge penalty of the loss-profile fit.
    pub ridge_lambda: f64,
    /// Number of schedule grid points (knots excluding the t=0 anchor).
    pub grid_size: usize,
    /// Interior knots of the loss-profile spline.
    pub spline_knots: usize,
}

impl Default for RefitParams {
    fn default() -> Self {
        Self {
            interval: 50,
            warmup: 1000,
            ema_beta: 0.9,
            floor_mu: 1e-3,
            // The spline's capacity (few knots) does the smoothing; the
            // ridge term only stabilizes the solve. A larger value shrinks
            // coefficients enough to leave derivative wiggles on flat
            // profiles that compete with the floor term.
            ridge_lambda: 1e-6,
            grid_size: 64,
            spline_knots: 8,
        }
    }
}

impl RefitParams {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.interval == 0 {
            return Err(ScheduleError::ParameterOutOfRange { name: "refit interval", value: 0.0 });
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(ScheduleError::ParameterOutOfRange {
                name: "refit ema_beta",
                value: self.ema_beta,
            });
        }
        if !(self.floor_mu > 0.0 && self.floor_mu <= 1.0) {
            return Err(ScheduleError::ParameterOutOfRange {
                name: "refit floor_mu",
                value: self.floor_mu,
            });
        }
        if self.ridge_lambda < 0.0 {
            return Err(ScheduleError::ParameterOutOfRange {
                name: "refit ridge_lambda",
                value: self.ridge_lambda,
            });
        }
        if self.grid_size < 2 {
            return Err(ScheduleError::ParameterOutOfRange {
                name: "refit grid_size",
                value: self.grid_size as f64,
            });
        }
        Ok(())
    }

    /// Minimum buffer occupancy before a refit is allowed.
    pub fn min_samples(&self) -> usize {
        10 * self.grid_size
    }
}

/// EMA state carried across refits (zero-initialized, bias-corrected on
/// read, like the first-moment estimate of an adaptive optimizer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefitState {
    ema_base: Vec<f64>,
    refit_count: u64,
}

impl RefitState {
    pub fn new(grid_size: usize) -> Self {
        Self { ema_base: vec![0.0; grid_size], refit_count: 0 }
    }

    pub fn refit_count(&self) -> u64 {
        self.refit_count
    }
}

/// One adaptive refit pass:
///
/// 1. smooth the buffered (t, loss) pairs into a profile estimate,
/// 2. weight each grid time by the clamped profile slope plus a uniform
///    floor, normalize into a CDF,
/// 3. pull the uniform grid back through the inverse CDF so times where the
///    loss changes fastest are visited more densely,
/// 4. blend the base schedule evaluated at the warped times into the EMA
///    state and emit the resulting knots as a new adaptive schedule.
///
/// The returned schedule keeps `base_schedule`'s `a_max`; the base profile
/// (linear or cosine-squared shape) is the one being warped.
pub fn adaptive_refit(
    buffer: &LossBuffer,
    base_schedule: &Schedule,
    params: &RefitParams,
    state: &mut RefitState,
) -> Result<Schedule, ScheduleError> {
    params.validate()?;
    if state.ema_base.len() != params.grid_size {
        return Err(ScheduleError::ParameterOutOfRange {
            name: "refit state size",
            value: state.ema_base.len() as f64,
        });
    }
    if buffer.len() < params.min_samples() {
        return Err(ScheduleError::InsufficientData {
            have: buffer.len(),
            need: params.min_samples(),
        });
    }
    let samples = buffer.samples();
    let profile = RidgeSpline::fit(&samples, params.spline_knots, params.ridge_lambda)?;

    let n = params.grid_size;
    // Grid t_j = j/n for j = 1..=n; the t = 0 anchor is added at the end.
    let grid: Vec<f64> = (1..=n).map(|j| j as f64 / n as f64).collect();
    let weights: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let g = profile.derivative(t).max(0.0);
            (1.0 - params.floor_mu) * g + params.floor_mu
        })
        .collect();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    for c in cdf.iter_mut() {
        *c /= total; // last entry is exactly 1.0
    }

    // Invert the CDF by interpolating t as a function of F (both monotone;
    // the floor keeps F strictly increasing).
    let mut inv_x = Vec::with_capacity(n + 1);
    let mut inv_y = Vec::with_capacity(n + 1);
    inv_x.push(0.0);
    inv_y.push(0.0);
    for (c, t) in cdf.iter().zip(&grid) {
        inv_x.push(*c);
        inv_y.push(*t);
    }
    let inverse = MonotoneCubic::new(inv_x, inv_y)?;

    state.refit_count += 1;
    let beta = params.ema_beta;
    let correction = 1.0 - beta.powi(state.refit_count as i32);
    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(n + 1);
    knots.push((0.0, 0.0));
    for (j, (&t, ema)) in grid.iter().zip(state.ema_base.iter_mut()).enumerate() {
        let warped = inverse.value(t).clamp(0.0, 1.0);
        let target = base_schedule.base(warped);
        *ema = beta * *ema + (1.0 - beta) * target;
        let mut value = (*ema / correction).clamp(0.0, 1.0);
        if j + 1 == n {
            value = 1.0; // endpoint contract: base(1) = 1 exactly
        }
        // Monotonicity can only be lost to rounding; restore it.
        let prev = knots.last().unwrap().1;
        knots.push((t, value.max(prev)));
    }
    Schedule::adaptive(base_schedule.a_max(), knots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_star_matches_reference_values() {
        // Spot values; the full 30-entry sweep lives in the acceptance suite.
        let cases = [
            ((0.1, 12, 512), 0.09273369218709283),
            ((0.01, 50_000, 768), 0.131358), // rounded published value 0.131
            ((0.1, 8, 64), 0.25710555440046456),
        ];
        for ((delta, v, d), want) in cases {
            let got = alpha_star(delta, v, d).unwrap();
            assert!((got - want).abs() < 1e-3, "alpha_star({delta},{v},{d}) = {got}");
        }
    }

    #[test]
    fn alpha_star_decreases_in_dimension_and_delta() {
        let a = alpha_star(0.1, 50_000, 256).unwrap();
        let b = alpha_star(0.1, 50_000, 1024).unwrap();
        assert!(b < a);
        let c = alpha_star(0.01, 50_000, 256).unwrap();
        assert!(c > a, "smaller delta needs a larger critical level");
    }

    #[test]
    fn alpha_star_rejects_tiny_dimensions() {
        // 2 ln(2*49999/0.01) = 32.24, so d = 32 pushes asin out of domain.
        match alpha_star(0.01, 50_000, 32) {
            Err(ScheduleError::DimensionTooSmall { dim: 32, required }) => {
                assert_eq!(required, 33);
            }
            other => panic!("expected DimensionTooSmall, got {other:?}"),
        }
        assert!(alpha_star(0.01, 50_000, 33).is_ok());
        assert!(alpha_star(0.0, 12, 64).is_err());
        assert!(alpha_star(1.0, 12, 64).is_err());
        assert!(alpha_star(0.1, 1, 64).is_err());
    }

    #[test]
    fn linear_and_cosine_endpoints_are_exact() {
        for a_max in [0.25, 0.879, 1.0] {
            for sched in [Schedule::linear(a_max).unwrap(), Schedule::cosine2(a_max).unwrap()] {
                assert_eq!(sched.alpha(0.0).unwrap(), 0.0);
                assert_eq!(sched.alpha(1.0).unwrap(), a_max);
            }
        }
    }

    #[test]
    fn schedules_are_monotone() {
        let knots = vec![(0.0, 0.0), (0.3, 0.1), (0.5, 0.55), (0.8, 0.8), (1.0, 1.0)];
        let scheds = [
            Schedule::linear(0.9).unwrap(),
            Schedule::cosine2(1.0).unwrap(),
            Schedule::adaptive(0.95, knots).unwrap(),
        ];
        for sched in &scheds {
            let mut prev = -1.0;
            for i in 0..=1000 {
                let t = i as f64 / 1000.0;
                let a = sched.alpha(t).unwrap();
                assert!(a >= prev - 1e-12, "{:?} dips at t={t}", sched.kind());
                assert!((0.0..=sched.a_max() + 1e-12).contains(&a));
                prev = a;
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(Schedule::linear(0.0).is_err());
        assert!(Schedule::linear(1.2).is_err());
        assert!(Schedule::linear(f64::NAN).is_err());
        let s = Schedule::linear(1.0).unwrap();
        assert!(s.alpha(-0.01).is_err());
        assert!(s.alpha(1.01).is_err());
        assert!(s.truncate(0.0).is_err());
        // Adaptive endpoint contract.
        assert!(Schedule::adaptive(1.0, vec![(0.0, 0.0), (1.0, 0.9)]).is_err());
        assert!(Schedule::adaptive(1.0, vec![(0.0, 0.1), (1.0, 1.0)]).is_err());
        assert!(Schedule::adaptive(1.0, vec![(0.0, 0.0), (0.5, 0.8), (1.0, 1.0)]).is_ok());
        assert!(Schedule::adaptive(1.0, vec![(0.0, 0.0), (0.5, 0.8), (0.6, 0.7), (1.0, 1.0)])
            .is_err());
    }

    #[test]
    fn truncation_is_pure_range_scaling() {
        let base = Schedule::cosine2(1.0).unwrap();
        let a = 0.8785871822338307; // 1 - alpha_star(0.1, 49152, 768)
        let trunc = base.truncate(a).unwrap();
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            let want = a * base.alpha(t).unwrap();
            let got = trunc.alpha(t).unwrap();
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(trunc.alpha(1.0).unwrap(), a);
    }

    #[test]
    fn linear_full_range_step_sizes_are_exact_harmonics() {
        let sched = Schedule::linear(1.0).unwrap();
        for n in [1usize, 4, 64] {
            let s = euler_step_sizes(&sched, n).unwrap();
            for (i, &si) in s.iter().enumerate() {
                let want = 1.0 / (n - i) as f64;
                assert_eq!(si, want, "N={n}, n={i}");
            }
            assert_eq!(*s.last().unwrap(), 1.0);
        }
    }

    #[test]
    fn step_sizes_compose_back_to_the_schedule() {
        let knots = vec![(0.0, 0.0), (0.25, 0.4), (0.75, 0.85), (1.0, 1.0)];
        let scheds = [
            Schedule::linear(1.0).unwrap(),
            Schedule::linear(0.743).unwrap(),
            Schedule::cosine2(0.9).unwrap(),
            Schedule::adaptive(1.0, knots).unwrap(),
        ];
        for sched in &scheds {
            for n in [1usize, 7, 32] {
                let s = euler_step_sizes(sched, n).unwrap();
                for (i, &si) in s.iter().enumerate() {
                    let a0 = sched.alpha(i as f64 / n as f64).unwrap();
                    let a1 = sched.alpha((i + 1) as f64 / n as f64).unwrap();
                    let composed = a0 + si * (1.0 - a0);
                    assert!(
                        (composed - a1).abs() <= 1e-12,
                        "{:?} N={n} n={i}: {composed} vs {a1}",
                        sched.kind()
                    );
                    assert!((0.0..=1.0).contains(&si));
                }
            }
        }
    }

    #[test]
    fn zero_step_budget_is_rejected() {
        let sched = Schedule::linear(1.0).unwrap();
        assert!(matches!(
            euler_step_sizes(&sched, 0),
            Err(ScheduleError::ParameterOutOfRange { .. })
        ));
    }

    #[test]
    fn loss_buffer_evicts_oldest_and_rejects_nonfinite() {
        let mut buf = LossBuffer::new(3);
        for i in 0..5 {
            buf.record(0.1 * i as f64, i as f64).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let samples = buf.samples();
        assert_eq!(samples[0].1, 2.0);
        assert_eq!(samples[2].1, 4.0);
        assert!(matches!(buf.record(0.5, f64::NAN), Err(ScheduleError::NonFiniteLoss { .. })));
        assert!(buf.record(1.5, 1.0).is_err());
        assert_eq!(buf.len(), 3, "rejected samples must not displace data");
    }

    fn fill_buffer(f: impl Fn(f64) -> f64, n: usize, seed: u64) -> LossBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = LossBuffer::new(n);
        for _ in 0..n {
            let t: f64 = rng.gen();
            buf.record(t, f(t)).unwrap();
        }
        buf
    }

    #[test]
    fn refit_needs_enough_samples() {
        let params = RefitParams::default();
        let base = Schedule::linear(1.0).unwrap();
        let mut state = RefitState::new(params.grid_size);
        let buf = fill_buffer(|t| t, params.min_samples() - 1, 3);
        assert!(matches!(
            adaptive_refit(&buf, &base, &params, &mut state),
            Err(ScheduleError::InsufficientData { .. })
        ));
    }

    #[test]
    fn refit_concentrates_where_the_loss_moves() {
        // Smoothstep profile whose derivative mass sits entirely inside
        // [0.4, 0.6]: at least 90% of the warped grid times must land in
        // that window. The knot VALUES are base(warped t); for a linear
        // base they equal the warped times directly.
        let profile = |t: f64| {
            let s = ((t - 0.4) / 0.2).clamp(0.0, 1.0);
            2.0 * s * s * (3.0 - 2.0 * s)
        };
        let params = RefitParams::default();
        let base = Schedule::linear(1.0).unwrap();
        let mut state = RefitState::new(params.grid_size);
        let buf = fill_buffer(profile, 1600, 11);
        let sched = adaptive_refit(&buf, &base, &params, &mut state).unwrap();
        let knots = sched.knots().unwrap();
        let warped: Vec<f64> = knots.iter().skip(1).map(|k| k.1).collect();
        let inside = warped.iter().filter(|&&w| (0.4..=0.6).contains(&w)).count();
        assert!(
            inside as f64 >= 0.9 * warped.len() as f64,
            "only {inside}/{} warped times in [0.4, 0.6]: {warped:?}",
            warped.len()
        );
    }

    #[test]
    fn refit_on_flat_profile_converges_to_base() {
        let params = RefitParams::default();
        for base in [Schedule::linear(1.0).unwrap(), Schedule::cosine2(0.9).unwrap()] {
            let mut state = RefitState::new(params.grid_size);
            let buf = fill_buffer(|_| 2.5, 1600, 17);
            let mut sched = adaptive_refit(&buf, &base, &params, &mut state).unwrap();
            for _ in 0..49 {
                sched = adaptive_refit(&buf, &base, &params, &mut state).unwrap();
            }
            for i in 0..=64 {
                let t = i as f64 / 64.0;
                let diff = (sched.alpha(t).unwrap() - base.alpha(t).unwrap()).abs();
                assert!(diff <= 1e-3, "{:?} flat-profile refit off by {diff} at t={t}", base.kind());
            }
        }
    }

    #[test]
    fn repeated_refit_on_fixed_buffer_converges() {
        let params = RefitParams::default();
        let base = Schedule::cosine2(1.0).unwrap();
        let mut state = RefitState::new(params.grid_size);
        let buf = fill_buffer(|t| (3.0 * t).sin() + 2.0 * t, 1600, 23);
        let mut prev = adaptive_refit(&buf, &base, &params, &mut state).unwrap();
        let mut movement = f64::INFINITY;
        for _ in 0..200 {
            let next = adaptive_refit(&buf, &base, &params, &mut state).unwrap();
            movement = prev
                .knots()
                .unwrap()
                .iter()
                .zip(next.knots().unwrap())
                .map(|(a, b)| (a.1 - b.1).abs())
                .fold(0.0, f64::max);
            prev = next;
            if movement < 1e-6 {
                break;
            }
        }
        assert!(movement < 1e-6, "knots still moving by {movement} after 200 refits");
    }

    #[test]
    fn refit_is_deterministic() {
        let params = RefitParams::default();
        let base = Schedule::linear(1.0).unwrap();
        let buf = fill_buffer(|t| t * t, 1600, 29);
        let mut s1 = RefitState::new(params.grid_size);
        let mut s2 = RefitState::new(params.grid_size);
        let a = adaptive_refit(&buf, &base, &params, &mut s1).unwrap();
        let b = adaptive_refit(&buf, &base, &params, &mut s2).unwrap();
        assert_eq!(a.knots(), b.knots());
    }

    #[test]
    fn schedule_json_round_trip_is_exact() {
        let knots = vec![
            (0.0, 0.0),
            (0.25, 0.123456789012345678),
            (0.5, 0.5000000000000001),
            (1.0, 1.0),
        ];
        let sched = Schedule::adaptive(0.8785871822338307, knots.clone()).unwrap();
        let json = serde_json::to_string(&sched).unwrap();
        let back: Schedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back.a_max(), sched.a_max());
        assert_eq!(back.knots().unwrap(), knots);
        for kind in [Schedule::linear(0.743).unwrap(), Schedule::cosine2(1.0).unwrap()] {
            let json = serde_json::to_string(&kind).unwrap();
            let back: Schedule = serde_json::from_str(&json).unwrap();
            assert_eq!(back, kind);
        }
    }
}
