//! Normalized backbone. No biases and no layer norm: queries/keys are
//! unit-normalized per head and rescaled, every sublayer output is projected
//! back to the unit sphere, and residual mixing is a gated interpolation
//! `h <- Norm(Norm(h) + g .* (Norm(h_layer) - Norm(h)))` whose gates
//! `g = |gamma * (gamma_init/b) + delta(t)|` carry the time signal through a
//! zero-initialized map, making a fresh network time-independent.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attn::{attn_bwd, attn_fwd, AttnCache};
use super::math::{
    axpy, dot, gelu, gelu_prime, linear_bwd_w, linear_bwd_x, linear_fwd, unit_norm_bwd,
    unit_norm_fwd, RopeTable, SeqMat,
};
use super::{DenoiserConfig, ParameterSet, NORM_EPS};

pub(super) struct Idx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub s_qk: usize,
    pub w1: usize,
    pub w2: usize,
    pub s_fc: usize,
    pub gamma_a: usize,
    pub gamma_m: usize,
    pub w_delta: usize,
}

impl Idx {
    pub(super) fn fetch(p: &ParameterSet, l: usize) -> Self {
        let f = |s: &str| p.index_of(&format!("blk{l}.{s}")).expect("layout checked");
        Self {
            wq: f("attn.wq"),
            wk: f("attn.wk"),
            wv: f("attn.wv"),
            wo: f("attn.wo"),
            s_qk: f("attn.s_qk"),
            w1: f("mlp.w1"),
            w2: f("mlp.w2"),
            s_fc: f("mlp.s_fc"),
            gamma_a: f("gate.gamma_a"),
            gamma_m: f("gate.gamma_m"),
            w_delta: f("time.w_delta"),
        }
    }
}

pub(super) struct BlockCache {
    qn: SeqMat,
    kn: SeqMat,
    qu: SeqMat,
    ku: SeqMat,
    n_q: Vec<f64>,
    n_k: Vec<f64>,
    v: SeqMat,
    attn: AttnCache,
    o_cat: SeqMat,
    hn_a: SeqMat,
    n_h0: Vec<f64>,
    an: SeqMat,
    n_attn: Vec<f64>,
    pre_a: Vec<f64>,
    pub(super) h1: SeqMat,
    n_ra: Vec<f64>,
    hn_m: SeqMat,
    n_h1: Vec<f64>,
    u: SeqMat,
    us: SeqMat,
    a_used: SeqMat,
    mlp_mask: Option<Vec<f64>>,
    mn: SeqMat,
    n_mlp: Vec<f64>,
    pre_m: Vec<f64>,
    pub(super) h2: SeqMat,
    n_rm: Vec<f64>,
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn unit_rows(x: &SeqMat) -> (SeqMat, Vec<f64>) {
    let mut out = SeqMat::zeros(x.rows, x.cols);
    let mut norms = vec![0.0; x.rows];
    for l in 0..x.rows {
        norms[l] = unit_norm_fwd(x.row(l), NORM_EPS, out.row_mut(l));
    }
    (out, norms)
}

/// Runs one block in place on `h` and returns the activation cache.
pub(super) fn block_fwd(
    cfg: &DenoiserConfig,
    p: &ParameterSet,
    ix: &Idx,
    h: &mut SeqMat,
    cvec: &[f64],
    rope: &RopeTable,
    mut drop: Option<(f64, &mut ChaCha8Rng)>,
) -> BlockCache {
    let (rows, d) = (h.rows, h.cols);
    let (heads, hd, hidden) = (cfg.heads, cfg.head_dim(), cfg.hidden_dim());
    let td = |i: usize| -> &[f64] { &p.tensors()[i].data };
    let b = cfg.base_scale();
    let sqrt_d = (d as f64).sqrt();

    let cv = SeqMat { rows: 1, cols: cfg.cond_dim, data: cvec.to_vec() };
    let mut deltam = SeqMat::zeros(1, 2 * d);
    linear_fwd(&cv, td(ix.w_delta), None, &mut deltam);
    let gscale = cfg.gamma_init / b;
    let pre_a: Vec<f64> =
        (0..d).map(|i| td(ix.gamma_a)[i] * gscale + deltam.data[i]).collect();
    let pre_m: Vec<f64> =
        (0..d).map(|i| td(ix.gamma_m)[i] * gscale + deltam.data[d + i]).collect();

    let mut q = SeqMat::zeros(rows, d);
    let mut k = SeqMat::zeros(rows, d);
    let mut v = SeqMat::zeros(rows, d);
    linear_fwd(h, td(ix.wq), None, &mut q);
    linear_fwd(h, td(ix.wk), None, &mut k);
    linear_fwd(h, td(ix.wv), None, &mut v);
    for l in 0..rows {
        for hh in 0..heads {
            rope.apply(l, &mut q.row_mut(l)[hh * hd..(hh + 1) * hd]);
            rope.apply(l, &mut k.row_mut(l)[hh * hd..(hh + 1) * hd]);
        }
    }
    let qscale = cfg.s_qk_init / b;
    let s_eff: Vec<f64> = td(ix.s_qk).iter().map(|&s| s * qscale).collect();
    let mut qu = SeqMat::zeros(rows, d);
    let mut ku = SeqMat::zeros(rows, d);
    let mut n_q = vec![0.0; rows * heads];
    let mut n_k = vec![0.0; rows * heads];
    for l in 0..rows {
        for hh in 0..heads {
            let cs = hh * hd..(hh + 1) * hd;
            n_q[l * heads + hh] = unit_norm_fwd(&q.row(l)[cs.clone()], NORM_EPS, &mut qu.row_mut(l)[cs.clone()]);
            n_k[l * heads + hh] = unit_norm_fwd(&k.row(l)[cs.clone()], NORM_EPS, &mut ku.row_mut(l)[cs]);
        }
    }
    let mut qn = qu.clone();
    let mut kn = ku.clone();
    for l in 0..rows {
        for (x, &s) in qn.row_mut(l).iter_mut().zip(&s_eff) {
            *x *= s;
        }
        for (x, &s) in kn.row_mut(l).iter_mut().zip(&s_eff) {
            *x *= s;
        }
    }
    let mut o_cat = SeqMat::zeros(rows, d);
    let scale = (hd as f64).sqrt();
    let attn =
        attn_fwd(&qn, &kn, &v, heads, scale, drop.as_mut().map(|(p, r)| (*p, &mut **r)), &mut o_cat);
    let mut attn_raw = SeqMat::zeros(rows, d);
    linear_fwd(&o_cat, td(ix.wo), None, &mut attn_raw);

    let (hn_a, n_h0) = unit_rows(h);
    let (an, n_attn) = unit_rows(&attn_raw);
    let mut h1 = SeqMat::zeros(rows, d);
    let mut n_ra = vec![0.0; rows];
    let mut r = vec![0.0; d];
    for l in 0..rows {
        for i in 0..d {
            let hni = hn_a.row(l)[i];
            r[i] = hni + pre_a[i].abs() * (an.row(l)[i] - hni);
        }
        n_ra[l] = unit_norm_fwd(&r, NORM_EPS, h1.row_mut(l));
    }
    *h = h1.clone();

    let (hn_m, n_h1) = unit_rows(&h1);
    let mut u = SeqMat::zeros(rows, hidden);
    linear_fwd(&h1, td(ix.w1), None, &mut u);
    let s_fc = td(ix.s_fc);
    let mut us = u.clone();
    for l in 0..rows {
        for (x, &s) in us.row_mut(l).iter_mut().zip(s_fc) {
            *x *= sqrt_d * s;
        }
    }
    let mut a_used =
        SeqMat { rows, cols: hidden, data: us.data.iter().map(|&x| gelu(x)).collect() };
    let mlp_mask = drop.as_mut().map(|(pd, rng)| {
        let mut mask = Vec::with_capacity(rows * hidden);
        for a in a_used.data.iter_mut() {
            let m = if rng.gen::<f64>() < *pd { 0.0 } else { 1.0 / (1.0 - *pd) };
            *a *= m;
            mask.push(m);
        }
        mask
    });
    let mut mlp_raw = SeqMat::zeros(rows, d);
    linear_fwd(&a_used, td(ix.w2), None, &mut mlp_raw);
    let (mn, n_mlp) = unit_rows(&mlp_raw);
    let mut h2 = SeqMat::zeros(rows, d);
    let mut n_rm = vec![0.0; rows];
    for l in 0..rows {
        for i in 0..d {
            let hni = hn_m.row(l)[i];
            r[i] = hni + pre_m[i].abs() * (mn.row(l)[i] - hni);
        }
        n_rm[l] = unit_norm_fwd(&r, NORM_EPS, h2.row_mut(l));
    }
    *h = h2.clone();

    BlockCache {
        qn,
        kn,
        qu,
        ku,
        n_q,
        n_k,
        v,
        attn,
        o_cat,
        hn_a,
        n_h0,
        an,
        n_attn,
        pre_a,
        h1,
        n_ra,
        hn_m,
        n_h1,
        u,
        us,
        a_used,
        mlp_mask,
        mn,
        n_mlp,
        pre_m,
        h2,
        n_rm,
    }
}

/// Pullback of `block_fwd`. Unlike the additive backbone there is no identity
/// residual: all of `dh` flows through the normalization chain, so `dh` is
/// replaced, not accumulated. `h_in` is the block's input activations (the
/// previous block's output, or the latents for block 0).
#[allow(clippy::too_many_arguments)]
pub(super) fn block_bwd(
    cfg: &DenoiserConfig,
    p: &ParameterSet,
    ix: &Idx,
    grads: &mut [Vec<f64>],
    cache: &BlockCache,
    h_in: &SeqMat,
    dh: &mut SeqMat,
    dcvec: &mut [f64],
    rope: &RopeTable,
    cvec: &[f64],
) {
    let (rows, d) = (dh.rows, dh.cols);
    let (heads, hd, hidden) = (cfg.heads, cfg.head_dim(), cfg.hidden_dim());
    let td = |i: usize| -> &[f64] { &p.tensors()[i].data };
    let b = cfg.base_scale();
    let sqrt_d = (d as f64).sqrt();
    let gscale = cfg.gamma_init / b;
    let qscale = cfg.s_qk_init / b;
    let mut ddelta = vec![0.0; 2 * d];

    // MLP residual interpolation.
    let mut dr = SeqMat::zeros(rows, d);
    for l in 0..rows {
        unit_norm_bwd(cache.h2.row(l), cache.n_rm[l], NORM_EPS, dh.row(l), dr.row_mut(l));
    }
    let mut dgate_m = vec![0.0; d];
    let mut dmn = SeqMat::zeros(rows, d);
    let mut dhn_m = SeqMat::zeros(rows, d);
    for l in 0..rows {
        for i in 0..d {
            let g = cache.pre_m[i].abs();
            let (mni, hni) = (cache.mn.row(l)[i], cache.hn_m.row(l)[i]);
            let dri = dr.row(l)[i];
            dgate_m[i] += dri * (mni - hni);
            dmn.row_mut(l)[i] = dri * g;
            dhn_m.row_mut(l)[i] = dri * (1.0 - g);
        }
    }
    let mut dmlp_raw = SeqMat::zeros(rows, d);
    let mut dh1 = SeqMat::zeros(rows, d);
    for l in 0..rows {
        unit_norm_bwd(cache.mn.row(l), cache.n_mlp[l], NORM_EPS, dmn.row(l), dmlp_raw.row_mut(l));
        unit_norm_bwd(cache.hn_m.row(l), cache.n_h1[l], NORM_EPS, dhn_m.row(l), dh1.row_mut(l));
    }
    // MLP chain.
    linear_bwd_w(&cache.a_used, &dmlp_raw, &mut grads[ix.w2], None);
    let mut da = SeqMat::zeros(rows, hidden);
    linear_bwd_x(&dmlp_raw, td(ix.w2), &mut da);
    if let Some(mask) = &cache.mlp_mask {
        for (v, m) in da.data.iter_mut().zip(mask) {
            *v *= m;
        }
    }
    let mut dus = da;
    for (v, &x) in dus.data.iter_mut().zip(&cache.us.data) {
        *v *= gelu_prime(x);
    }
    {
        let g_fc = &mut grads[ix.s_fc];
        for l in 0..rows {
            for ((g, &dusi), &ui) in g_fc.iter_mut().zip(dus.row(l)).zip(cache.u.row(l)) {
                *g += dusi * sqrt_d * ui;
            }
        }
    }
    let s_fc = td(ix.s_fc);
    let mut du = dus;
    for l in 0..rows {
        for (v, &s) in du.row_mut(l).iter_mut().zip(s_fc) {
            *v *= sqrt_d * s;
        }
    }
    linear_bwd_w(&cache.h1, &du, &mut grads[ix.w1], None);
    linear_bwd_x(&du, td(ix.w1), &mut dh1);
    // MLP gate.
    for i in 0..d {
        let dpre = dgate_m[i] * sgn(cache.pre_m[i]);
        grads[ix.gamma_m][i] += dpre * gscale;
        ddelta[d + i] = dpre;
    }

    // Attention residual interpolation (upstream is now dh1).
    dr.data.fill(0.0);
    for l in 0..rows {
        unit_norm_bwd(cache.h1.row(l), cache.n_ra[l], NORM_EPS, dh1.row(l), dr.row_mut(l));
    }
    let mut dgate_a = vec![0.0; d];
    let mut dan = SeqMat::zeros(rows, d);
    let mut dhn_a = SeqMat::zeros(rows, d);
    for l in 0..rows {
        for i in 0..d {
            let g = cache.pre_a[i].abs();
            let (ani, hni) = (cache.an.row(l)[i], cache.hn_a.row(l)[i]);
            let dri = dr.row(l)[i];
            dgate_a[i] += dri * (ani - hni);
            dan.row_mut(l)[i] = dri * g;
            dhn_a.row_mut(l)[i] = dri * (1.0 - g);
        }
    }
    let mut dattn_raw = SeqMat::zeros(rows, d);
    let mut dh0 = SeqMat::zeros(rows, d);
    for l in 0..rows {
        unit_norm_bwd(cache.an.row(l), cache.n_attn[l], NORM_EPS, dan.row(l), dattn_raw.row_mut(l));
        unit_norm_bwd(cache.hn_a.row(l), cache.n_h0[l], NORM_EPS, dhn_a.row(l), dh0.row_mut(l));
    }
    // Attention chain.
    linear_bwd_w(&cache.o_cat, &dattn_raw, &mut grads[ix.wo], None);
    let mut do_cat = SeqMat::zeros(rows, d);
    linear_bwd_x(&dattn_raw, td(ix.wo), &mut do_cat);
    let mut dqn = SeqMat::zeros(rows, d);
    let mut dkn = SeqMat::zeros(rows, d);
    let mut dv = SeqMat::zeros(rows, d);
    let scale = (hd as f64).sqrt();
    attn_bwd(&cache.attn, &cache.qn, &cache.kn, &cache.v, heads, scale, &do_cat, &mut dqn, &mut dkn, &mut dv);
    let s_eff: Vec<f64> = td(ix.s_qk).iter().map(|&s| s * qscale).collect();
    {
        let g_qk = &mut grads[ix.s_qk];
        for l in 0..rows {
            for i in 0..d {
                g_qk[i] += (dqn.row(l)[i] * cache.qu.row(l)[i]
                    + dkn.row(l)[i] * cache.ku.row(l)[i])
                    * qscale;
            }
        }
    }
    let mut dqu = dqn;
    let mut dku = dkn;
    for l in 0..rows {
        for (v, &s) in dqu.row_mut(l).iter_mut().zip(&s_eff) {
            *v *= s;
        }
        for (v, &s) in dku.row_mut(l).iter_mut().zip(&s_eff) {
            *v *= s;
        }
    }
    let mut dq = SeqMat::zeros(rows, d);
    let mut dk = SeqMat::zeros(rows, d);
    for l in 0..rows {
        for hh in 0..heads {
            let cs = hh * hd..(hh + 1) * hd;
            unit_norm_bwd(
                &cache.qu.row(l)[cs.clone()],
                cache.n_q[l * heads + hh],
                NORM_EPS,
                &dqu.row(l)[cs.clone()],
                &mut dq.row_mut(l)[cs.clone()],
            );
            unit_norm_bwd(
                &cache.ku.row(l)[cs.clone()],
                cache.n_k[l * heads + hh],
                NORM_EPS,
                &dku.row(l)[cs.clone()],
                &mut dk.row_mut(l)[cs],
            );
        }
    }
    for l in 0..rows {
        for hh in 0..heads {
            rope.apply_inverse(l, &mut dq.row_mut(l)[hh * hd..(hh + 1) * hd]);
            rope.apply_inverse(l, &mut dk.row_mut(l)[hh * hd..(hh + 1) * hd]);
        }
    }
    linear_bwd_w(h_in, &dq, &mut grads[ix.wq], None);
    linear_bwd_w(h_in, &dk, &mut grads[ix.wk], None);
    linear_bwd_w(h_in, &dv, &mut grads[ix.wv], None);
    linear_bwd_x(&dq, td(ix.wq), &mut dh0);
    linear_bwd_x(&dk, td(ix.wk), &mut dh0);
    linear_bwd_x(&dv, td(ix.wv), &mut dh0);
    // Attention gate.
    for i in 0..d {
        let dpre = dgate_a[i] * sgn(cache.pre_a[i]);
        grads[ix.gamma_a][i] += dpre * gscale;
        ddelta[i] = dpre;
    }
    // Time map.
    {
        let g = &mut grads[ix.w_delta];
        for (c, &cv) in cvec.iter().enumerate() {
            axpy(&mut g[c * 2 * d..(c + 1) * 2 * d], cv, &ddelta);
        }
    }
    let wd = td(ix.w_delta);
    for (c, dc) in dcvec.iter_mut().enumerate() {
        *dc += dot(&wd[c * 2 * d..(c + 1) * 2 * d], &ddelta);
    }
    *dh = dh0;
}
