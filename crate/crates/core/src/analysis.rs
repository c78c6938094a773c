//! Monte-Carlo checks of the random-codebook model (nearest-neighbor
//! lock-in, inner-product tail bounds) and the evaluation statistics used by
//! the experiment harness (unigram entropy, percentile bootstrap).
//!
//! Trials run in parallel on independent ChaCha streams derived from the
//! master seed, and aggregate through integer counters, so results are
//! deterministic regardless of thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{dot, sample_uniform, slerp};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty input")]
    EmptyInput,
    #[error("{name} out of range: {value}")]
    ParameterOutOfRange { name: &'static str, value: f64 },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
}

/// Success rates of nearest-neighbor decoding along a noise-level grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockinEstimate {
    pub alpha_grid: Vec<f64>,
    pub success_rate: Vec<f64>,
    pub trials: usize,
}

/// Per-epsilon row of the tail-bound table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailBoundRow {
    pub epsilon: f64,
    pub empirical: f64,
    pub bound: f64,
    /// Three-sigma Monte-Carlo half-width of the empirical rate.
    pub margin: f64,
    /// empirical <= bound + margin.
    pub holds: bool,
}

/// Per trial: draw a fresh uniform codebook and noise point, pick a target
/// row, interpolate toward it by each grid alpha, and score whether the
/// target stays the most similar row. One trial feeds every grid entry, so
/// the curve uses common random numbers across alphas.
pub fn mc_lockin(
    vocab: usize,
    dim: usize,
    alpha_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<LockinEstimate, AnalysisError> {
    if vocab < 2 {
        return Err(AnalysisError::ParameterOutOfRange { name: "vocab", value: vocab as f64 });
    }
    if dim < 2 {
        return Err(AnalysisError::ParameterOutOfRange { name: "dim", value: dim as f64 });
    }
    if trials < 100 {
        return Err(AnalysisError::ParameterOutOfRange { name: "trials", value: trials as f64 });
    }
    if alpha_grid.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    for &a in alpha_grid {
        if !(0.0..=1.0).contains(&a) {
            return Err(AnalysisError::ParameterOutOfRange { name: "alpha", value: a });
        }
    }

    let counts: Vec<u64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let rows: Vec<Vec<f64>> =
                (0..vocab).map(|_| sample_uniform(dim, &mut rng).coords().to_vec()).collect();
            let z0 = sample_uniform(dim, &mut rng);
            let k = rng.gen_range(0..vocab);
            let target =
                crate::geometry::SpherePoint::new(rows[k].clone()).expect("unit row is nonzero");
            let mut hits = vec![0u64; alpha_grid.len()];
            for (i, &alpha) in alpha_grid.iter().enumerate() {
                let z = slerp(&z0, &target, alpha)
                    .expect("an antipodal uniform draw has probability zero");
                let mut best = 0usize;
                let mut best_sim = f64::NEG_INFINITY;
                for (v, row) in rows.iter().enumerate() {
                    let sim = dot(z.coords(), row);
                    if sim > best_sim {
                        best_sim = sim;
                        best = v;
                    }
                }
                if best == k {
                    hits[i] = 1;
                }
            }
            hits
        })
        .reduce(
            || vec![0u64; alpha_grid.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );

    let success_rate = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    Ok(LockinEstimate { alpha_grid: alpha_grid.to_vec(), success_rate, trials })
}

/// Empirical P(<X,Y> > eps) for independent uniform X, Y on the sphere,
/// against the closed-form bound 2 exp(-d eps^2 / 2).
pub fn tail_bound_check(
    dim: usize,
    epsilon_grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<TailBoundRow>, AnalysisError> {
    if dim < 2 {
        return Err(AnalysisError::ParameterOutOfRange { name: "dim", value: dim as f64 });
    }
    if trials < 10_000 {
        return Err(AnalysisError::ParameterOutOfRange { name: "trials", value: trials as f64 });
    }
    if epsilon_grid.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    for &e in epsilon_grid {
        if !e.is_finite() {
            return Err(AnalysisError::ParameterOutOfRange { name: "epsilon", value: e });
        }
    }

    let counts: Vec<u64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            let x = sample_uniform(dim, &mut rng);
            let y = sample_uniform(dim, &mut rng);
            let sim = dot(x.coords(), y.coords());
            epsilon_grid.iter().map(|&e| u64::from(sim > e)).collect::<Vec<u64>>()
        })
        .reduce(
            || vec![0u64; epsilon_grid.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        );

    let n = trials as f64;
    Ok(epsilon_grid
        .iter()
        .zip(&counts)
        .map(|(&epsilon, &c)| {
            let empirical = c as f64 / n;
            let bound = 2.0 * (-(dim as f64) * epsilon * epsilon / 2.0).exp();
            let margin = 3.0 * (empirical * (1.0 - empirical) / n).sqrt();
            TailBoundRow { epsilon, empirical, bound, margin, holds: empirical <= bound + margin }
        })
        .collect())
}

/// Empirical token entropy in nats: -sum_v (c_v/L) ln(c_v/L) over tokens
/// that occur.
pub fn unigram_entropy(tokens: &[usize], vocab: usize) -> Result<f64, AnalysisError> {
    if tokens.is_empty() {
        return Err(AnalysisError::EmptySequence);
    }
    let mut counts = vec![0usize; vocab];
    for &tok in tokens {
        if tok >= vocab {
            return Err(AnalysisError::TokenOutOfRange { token: tok, vocab });
        }
        counts[tok] += 1;
    }
    let len = tokens.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / len;
            -p * p.ln()
        })
        .sum())
}

/// Percentile bootstrap over binary outcomes: B resamples with replacement,
/// point estimate = mean of resample accuracies, interval = linearly
/// interpolated percentiles at (1 - level)/2 and 1 - (1 - level)/2.
pub fn bootstrap_ci(
    outcomes: &[bool],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64, f64), AnalysisError> {
    if outcomes.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if b < 1 {
        return Err(AnalysisError::ParameterOutOfRange { name: "resamples", value: b as f64 });
    }
    if !(0.0 < level && level < 1.0) {
        return Err(AnalysisError::ParameterOutOfRange { name: "level", value: level });
    }
    let n = outcomes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accs = Vec::with_capacity(b);
    for _ in 0..b {
        let mut correct = 0usize;
        for _ in 0..n {
            if outcomes[rng.gen_range(0..n)] {
                correct += 1;
            }
        }
        accs.push(correct as f64 / n as f64);
    }
    let point = accs.iter().sum::<f64>() / b as f64;
    accs.sort_by(|a, b| a.partial_cmp(b).expect("accuracies are finite"));
    let tail = (1.0 - level) / 2.0;
    Ok((point, percentile_linear(&accs, tail), percentile_linear(&accs, 1.0 - tail)))
}

/// Linear-interpolation quantile of sorted data: rank h = (n-1) q, blended
/// between the neighboring order statistics.
fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Least-squares nondecreasing fit by pooling adjacent violators.
pub fn isotonic_fit(values: &[f64]) -> Vec<f64> {
    // Blocks of (mean, weight) merged whenever a new value breaks
    // monotonicity against the last block.
    let mut means: Vec<f64> = Vec::with_capacity(values.len());
    let mut weights: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        means.push(v);
        weights.push(1.0);
        while means.len() > 1 && means[means.len() - 2] > means[means.len() - 1] {
            let (m2, w2) = (means.pop().expect("nonempty"), weights.pop().expect("nonempty"));
            let last = means.len() - 1;
            let w = weights[last] + w2;
            means[last] = (means[last] * weights[last] + m2 * w2) / w;
            weights[last] = w;
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (m, w) in means.iter().zip(&weights) {
        for _ in 0..*w as usize {
            out.push(*m);
        }
    }
    out
}
