//! Pre-norm residual transformer block. The time signal enters through six
//! per-dimension modulation vectors (scale/shift after each norm, gate after
//! each sublayer) produced by a zero-initialized linear map of the
//! conditioning vector, so a freshly initialized block is the identity.

use rand_chacha::ChaCha8Rng;

use super::attn::{attn_bwd, attn_fwd, AttnCache};
use super::math::{
    axpy, dot, gelu, gelu_prime, layer_norm_bwd, layer_norm_fwd, linear_bwd_w, linear_bwd_x,
    linear_fwd, RopeTable, SeqMat,
};
use super::{DenoiserConfig, ParameterSet, LN_EPS};
use rand::Rng;

pub(super) struct Idx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ada_w: usize,
    pub ada_b: usize,
}

impl Idx {
    pub(super) fn fetch(p: &ParameterSet, l: usize) -> Self {
        let f = |s: &str| p.index_of(&format!("blk{l}.{s}")).expect("layout checked");
        Self {
            wq: f("attn.wq"),
            bq: f("attn.bq"),
            wk: f("attn.wk"),
            bk: f("attn.bk"),
            wv: f("attn.wv"),
            bv: f("attn.bv"),
            wo: f("attn.wo"),
            bo: f("attn.bo"),
            w1: f("mlp.w1"),
            b1: f("mlp.b1"),
            w2: f("mlp.w2"),
            b2: f("mlp.b2"),
            ada_w: f("ada.w"),
            ada_b: f("ada.b"),
        }
    }
}

pub(super) struct BlockCache {
    xhat1: SeqMat,
    rstd1: Vec<f64>,
    xm1: SeqMat,
    q: SeqMat,
    k: SeqMat,
    v: SeqMat,
    attn: AttnCache,
    o_cat: SeqMat,
    attn_out: SeqMat,
    xhat2: SeqMat,
    rstd2: Vec<f64>,
    xm2: SeqMat,
    u: SeqMat,
    a_used: SeqMat,
    mlp_mask: Option<Vec<f64>>,
    mlp_out: SeqMat,
    /// Modulation values (gamma1, beta1, gate1, gamma2, beta2, gate2).
    modv: Vec<f64>,
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

    let cv = SeqMat { rows: 1, cols: cfg.cond_dim, data: cvec.to_vec() };
    let mut modm = SeqMat::zeros(1, 6 * d);
    linear_fwd(&cv, td(ix.ada_w), Some(td(ix.ada_b)), &mut modm);
    let modv = modm.data;
    let (ga1, be1, gt1) = (&modv[0..d], &modv[d..2 * d], &modv[2 * d..3 * d]);
    let (ga2, be2, gt2) = (&modv[3 * d..4 * d], &modv[4 * d..5 * d], &modv[5 * d..6 * d]);

    let mut xhat1 = SeqMat::zeros(rows, d);
    let mut rstd1 = vec![0.0; rows];
    layer_norm_fwd(h, LN_EPS, &mut xhat1, &mut rstd1);
    let mut xm1 = SeqMat::zeros(rows, d);
    for l in 0..rows {
        for (i, (x, &xh)) in xm1.row_mut(l).iter_mut().zip(xhat1.row(l)).enumerate() {
            *x = xh * (1.0 + ga1[i]) + be1[i];
        }
    }

    let mut q = SeqMat::zeros(rows, d);
    let mut k = SeqMat::zeros(rows, d);
    let mut v = SeqMat::zeros(rows, d);
    linear_fwd(&xm1, td(ix.wq), Some(td(ix.bq)), &mut q);
    linear_fwd(&xm1, td(ix.wk), Some(td(ix.bk)), &mut k);
    linear_fwd(&xm1, td(ix.wv), Some(td(ix.bv)), &mut v);
    for l in 0..rows {
        for hh in 0..heads {
            rope.apply(l, &mut q.row_mut(l)[hh * hd..(hh + 1) * hd]);
            rope.apply(l, &mut k.row_mut(l)[hh * hd..(hh + 1) * hd]);
        }
    }
    let mut o_cat = SeqMat::zeros(rows, d);
    let scale = 1.0 / (hd as f64).sqrt();
    let attn = attn_fwd(&q, &k, &v, heads, scale, drop.as_mut().map(|(p, r)| (*p, &mut **r)), &mut o_cat);
    let mut attn_out = SeqMat::zeros(rows, d);
    linear_fwd(&o_cat, td(ix.wo), Some(td(ix.bo)), &mut attn_out);
    for l in 0..rows {
        for (i, (hi, &ao)) in h.row_mut(l).iter_mut().zip(attn_out.row(l)).enumerate() {
            *hi += gt1[i] * ao;
        }
    }

    let mut xhat2 = SeqMat::zeros(rows, d);
    let mut rstd2 = vec![0.0; rows];
    layer_norm_fwd(h, LN_EPS, &mut xhat2, &mut rstd2);
    let mut xm2 = SeqMat::zeros(rows, d);
    for l in 0..rows {
        for (i, (x, &xh)) in xm2.row_mut(l).iter_mut().zip(xhat2.row(l)).enumerate() {
            *x = xh * (1.0 + ga2[i]) + be2[i];
        }
    }
    let mut u = SeqMat::zeros(rows, hidden);
    linear_fwd(&xm2, td(ix.w1), Some(td(ix.b1)), &mut u);
    let mut a_used = SeqMat { rows, cols: hidden, data: u.data.iter().map(|&x| gelu(x)).collect() };
    let mlp_mask = drop.as_mut().map(|(pd, rng)| {
        let mut mask = Vec::with_capacity(rows * hidden);
        for a in a_used.data.iter_mut() {
            let m = if rng.gen::<f64>() < *pd { 0.0 } else { 1.0 / (1.0 - *pd) };
            *a *= m;
            mask.push(m);
        }
        mask
    });
    let mut mlp_out = SeqMat::zeros(rows, d);
    linear_fwd(&a_used, td(ix.w2), Some(td(ix.b2)), &mut mlp_out);
    for l in 0..rows {
        for (i, (hi, &mo)) in h.row_mut(l).iter_mut().zip(mlp_out.row(l)).enumerate() {
            *hi += gt2[i] * mo;
        }
    }

    BlockCache {
        xhat1,
        rstd1,
        xm1,
        q,
        k,
        v,
        attn,
        o_cat,
        attn_out,
        xhat2,
        rstd2,
        xm2,
        u,
        a_used,
        mlp_mask,
        mlp_out,
        modv,
    }
}

/// Pullback of `block_fwd`. `dh` holds the gradient at the block output on
/// entry and the gradient at the block input on exit; conditioning-vector
/// gradient accumulates into `dcvec`.
#[allow(clippy::too_many_arguments)]
pub(super) fn block_bwd(
    cfg: &DenoiserConfig,
    p: &ParameterSet,
    ix: &Idx,
    grads: &mut [Vec<f64>],
    cache: &BlockCache,
    dh: &mut SeqMat,
    dcvec: &mut [f64],
    rope: &RopeTable,
    cvec: &[f64],
) {
    let (rows, d) = (dh.rows, dh.cols);
    let (heads, hd, hidden) = (cfg.heads, cfg.head_dim(), cfg.hidden_dim());
    let td = |i: usize| -> &[f64] { &p.tensors()[i].data };
    let modv = &cache.modv;
    let (ga1, gt1) = (&modv[0..d], &modv[2 * d..3 * d]);
    let (ga2, gt2) = (&modv[3 * d..4 * d], &modv[5 * d..6 * d]);
    let mut dmod = vec![0.0; 6 * d];

    // MLP half.
    let mut dmlp_out = SeqMat::zeros(rows, d);
    for l in 0..rows {
        let dhr = dh.row(l);
        let mor = cache.mlp_out.row(l);
        for i in 0..d {
            dmod[5 * d + i] += dhr[i] * mor[i];
            dmlp_out.row_mut(l)[i] = dhr[i] * gt2[i];
        }
    }
    linear_bwd_w(&cache.a_used, &dmlp_out, &mut grads[ix.w2], None);
    for l in 0..rows {
        axpy(&mut grads[ix.b2], 1.0, dmlp_out.row(l));
    }
    let mut da = SeqMat::zeros(rows, hidden);
    linear_bwd_x(&dmlp_out, td(ix.w2), &mut da);
    if let Some(mask) = &cache.mlp_mask {
        for (v, m) in da.data.iter_mut().zip(mask) {
            *v *= m;
        }
    }
    let mut du = da;
    for (v, &x) in du.data.iter_mut().zip(&cache.u.data) {
        *v *= gelu_prime(x);
    }
    linear_bwd_w(&cache.xm2, &du, &mut grads[ix.w1], None);
    for l in 0..rows {
        axpy(&mut grads[ix.b1], 1.0, du.row(l));
    }
    let mut dxm2 = SeqMat::zeros(rows, d);
    linear_bwd_x(&du, td(ix.w1), &mut dxm2);
    let mut dxhat2 = SeqMat::zeros(rows, d);
    for l in 0..rows {
        let dxr = dxm2.row(l);
        let xhr = cache.xhat2.row(l);
        for i in 0..d {
            dmod[3 * d + i] += dxr[i] * xhr[i];
            dmod[4 * d + i] += dxr[i];
            dxhat2.row_mut(l)[i] = dxr[i] * (1.0 + ga2[i]);
        }
    }
    let mut tmp = SeqMat::zeros(rows, d);
    layer_norm_bwd(&cache.xhat2, &cache.rstd2, &dxhat2, &mut tmp);
    axpy(&mut dh.data, 1.0, &tmp.data);

    // Attention half.
    let mut dattn_out = SeqMat::zeros(rows, d);
    for l in 0..rows {
        let dhr = dh.row(l);
        let aor = cache.attn_out.row(l);
        for i in 0..d {
            dmod[2 * d + i] += dhr[i] * aor[i];
            dattn_out.row_mut(l)[i] = dhr[i] * gt1[i];
        }
    }
    linear_bwd_w(&cache.o_cat, &dattn_out, &mut grads[ix.wo], None);
    for l in 0..rows {
        axpy(&mut grads[ix.bo], 1.0, dattn_out.row(l));
    }
    let mut do_cat = SeqMat::zeros(rows, d);
    linear_bwd_x(&dattn_out, td(ix.wo), &mut do_cat);
    let mut dq = SeqMat::zeros(rows, d);
    let mut dk = SeqMat::zeros(rows, d);
    let mut dv = SeqMat::zeros(rows, d);
    let scale = 1.0 / (hd as f64).sqrt();
    attn_bwd(&cache.attn, &cache.q, &cache.k, &cache.v, heads, scale, &do_cat, &mut dq, &mut dk, &mut dv);
    for l in 0..rows {
        for hh in 0..heads {
            rope.apply_inverse(l, &mut dq.row_mut(l)[hh * hd..(hh + 1) * hd]);
            rope.apply_inverse(l, &mut dk.row_mut(l)[hh * hd..(hh + 1) * hd]);
        }
    }
    linear_bwd_w(&cache.xm1, &dq, &mut grads[ix.wq], None);
    linear_bwd_w(&cache.xm1, &dk, &mut grads[ix.wk], None);
    linear_bwd_w(&cache.xm1, &dv, &mut grads[ix.wv], None);
    for l in 0..rows {
        axpy(&mut grads[ix.bq], 1.0, dq.row(l));
        axpy(&mut grads[ix.bk], 1.0, dk.row(l));
        axpy(&mut grads[ix.bv], 1.0, dv.row(l));
    }
    let mut dxm1 = SeqMat::zeros(rows, d);
    linear_bwd_x(&dq, td(ix.wq), &mut dxm1);
    linear_bwd_x(&dk, td(ix.wk), &mut dxm1);
    linear_bwd_x(&dv, td(ix.wv), &mut dxm1);
    let mut dxhat1 = SeqMat::zeros(rows, d);
    for l in 0..rows {
        let dxr = dxm1.row(l);
        let xhr = cache.xhat1.row(l);
        for i in 0..d {
            dmod[i] += dxr[i] * xhr[i];
            dmod[d + i] += dxr[i];
            dxhat1.row_mut(l)[i] = dxr[i] * (1.0 + ga1[i]);
        }
    }
    tmp.data.fill(0.0);
    layer_norm_bwd(&cache.xhat1, &cache.rstd1, &dxhat1, &mut tmp);
    axpy(&mut dh.data, 1.0, &tmp.data);

    // Modulation map.
    {
        let g = &mut grads[ix.ada_w];
        for (c, &cv) in cvec.iter().enumerate() {
            axpy(&mut g[c * 6 * d..(c + 1) * 6 * d], cv, &dmod);
        }
    }
    axpy(&mut grads[ix.ada_b], 1.0, &dmod);
    let wada = td(ix.ada_w);
    for (c, dc) in dcvec.iter_mut().enumerate() {
        *dc += dot(&wada[c * 6 * d..(c + 1) * 6 * d], &dmod);
    }
}
