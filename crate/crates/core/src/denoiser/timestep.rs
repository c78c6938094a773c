//! Timestep conditioning: sinusoidal features of the time value pushed
//! through a two-layer SiLU MLP. Both backbones consume the SiLU of the MLP
//! output as their conditioning vector, so that activation is folded in here.

use super::math::{linear_bwd_w, linear_bwd_x, linear_fwd, silu, silu_prime, SeqMat};

/// The sinusoid argument is `1000 * t`; with frequencies spanning 1 down to
/// 1e-4 this gives t in [0,1] a full sweep of the fastest channels while the
/// slowest stay near-linear.
const TIME_SCALE: f64 = 1000.0;

/// Raw sinusoidal features: `cond_dim/2` geometrically spaced frequencies,
/// cosine channels first, then sine. `cond_dim` must be even.
pub fn features(t: f64, cond_dim: usize) -> Vec<f64> {
    assert!(cond_dim % 2 == 0, "conditioning width must be even");
    let half = cond_dim / 2;
    let mut out = vec![0.0; cond_dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = TIME_SCALE * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

pub struct TimeCache {
    feat: SeqMat,
    p1: SeqMat,
    a1: SeqMat,
    p2: SeqMat,
    /// SiLU of the MLP output; the conditioning vector blocks consume.
    pub cvec: Vec<f64>,
}

pub fn time_fwd(
    t: f64,
    cond_dim: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> TimeCache {
    let feat = SeqMat { rows: 1, cols: cond_dim, data: features(t, cond_dim) };
    let mut p1 = SeqMat::zeros(1, cond_dim);
    linear_fwd(&feat, w1, Some(b1), &mut p1);
    let a1 = SeqMat { rows: 1, cols: cond_dim, data: p1.data.iter().map(|&x| silu(x)).collect() };
    let mut p2 = SeqMat::zeros(1, cond_dim);
    linear_fwd(&a1, w2, Some(b2), &mut p2);
    let cvec = p2.data.iter().map(|&x| silu(x)).collect();
    TimeCache { feat, p1, a1, p2, cvec }
}

/// Accumulates MLP weight gradients from the gradient of the conditioning
/// vector. The time value itself is an input, not a parameter, so nothing
/// flows further back.
#[allow(clippy::too_many_arguments)]
pub fn time_bwd(
    cache: &TimeCache,
    w1: &[f64],
    w2: &[f64],
    dcvec: &[f64],
    dw1: &mut [f64],
    db1: &mut [f64],
    dw2: &mut [f64],
    db2: &mut [f64],
) {
    let cond = cache.feat.cols;
    let dp2 = SeqMat {
        rows: 1,
        cols: cond,
        data: dcvec.iter().zip(&cache.p2.data).map(|(&g, &x)| g * silu_prime(x)).collect(),
    };
    linear_bwd_w(&cache.a1, &dp2, dw2, None);
    for (b, &g) in db2.iter_mut().zip(&dp2.data) {
        *b += g;
    }
    let mut da1 = SeqMat::zeros(1, cond);
    linear_bwd_x(&dp2, w2, &mut da1);
    let dp1 = SeqMat {
        rows: 1,
        cols: cond,
        data: da1.data.iter().zip(&cache.p1.data).map(|(&g, &x)| g * silu_prime(x)).collect(),
    };
    linear_bwd_w(&cache.feat, &dp1, dw1, None);
    for (b, &g) in db1.iter_mut().zip(&dp1.data) {
        *b += g;
    }
    let _ = w1;
}
