//! Bidirectional multi-head attention core shared by both backbones. The
//! backbones prepare queries/keys differently (plain vs unit-normalized and
//! rescaled) and pass their own softmax scale; this module owns the
//! score/softmax/mix part and its exact pullback.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::math::{axpy, dot, softmax_row, softmax_bwd_row, SeqMat};

/// Activations the backward pass needs: post-softmax probabilities laid out
/// as `(head, query, key)` and, when dropout was active, the per-entry
/// multiplier (0 or 1/(1-p)) in the same layout.
pub struct AttnCache {
    pub att: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

/// Runs attention for all heads. `q`, `k`, `v` are full-width row matrices;
/// head `h` lives in columns `[h*dk, (h+1)*dk)`. Dropout multipliers are
/// drawn in a fixed `(head, query, key)` order so runs are reproducible.
pub fn attn_fwd(
    q: &SeqMat,
    k: &SeqMat,
    v: &SeqMat,
    heads: usize,
    scale: f64,
    mut drop: Option<(f64, &mut ChaCha8Rng)>,
    out: &mut SeqMat,
) -> AttnCache {
    let rows = q.rows;
    let dk = q.cols / heads;
    let mut att = vec![0.0; heads * rows * rows];
    let mut mask: Vec<f64> = Vec::new();
    out.data.fill(0.0);
    for h in 0..heads {
        let cs = h * dk;
        for l1 in 0..rows {
            let arow = &mut att[(h * rows + l1) * rows..][..rows];
            {
                let qh = &q.row(l1)[cs..cs + dk];
                for (l2, a) in arow.iter_mut().enumerate() {
                    *a = scale * dot(qh, &k.row(l2)[cs..cs + dk]);
                }
            }
            softmax_row(arow);
            let orow = &mut out.row_mut(l1)[cs..cs + dk];
            for (l2, &a) in arow.iter().enumerate() {
                let w = match drop.as_mut() {
                    Some((p, rng)) => {
                        let m = if rng.gen::<f64>() < *p { 0.0 } else { 1.0 / (1.0 - *p) };
                        mask.push(m);
                        a * m
                    }
                    None => a,
                };
                if w != 0.0 {
                    axpy(orow, w, &v.row(l2)[cs..cs + dk]);
                }
            }
        }
    }
    AttnCache { att, mask: drop.map(|_| mask) }
}

/// Pullback of `attn_fwd`: accumulates into `dq`, `dk`, `dv` (callers pass
/// zeroed buffers).
#[allow(clippy::too_many_arguments)]
pub fn attn_bwd(
    cache: &AttnCache,
    q: &SeqMat,
    k: &SeqMat,
    v: &SeqMat,
    heads: usize,
    scale: f64,
    dout: &SeqMat,
    dq: &mut SeqMat,
    dk: &mut SeqMat,
    dv: &mut SeqMat,
) {
    let rows = q.rows;
    let dkc = q.cols / heads;
    let mut dau = vec![0.0; rows];
    let mut datt = vec![0.0; rows];
    let mut ds = vec![0.0; rows];
    for h in 0..heads {
        let cs = h * dkc;
        for l1 in 0..rows {
            let base = (h * rows + l1) * rows;
            let arow = &cache.att[base..base + rows];
            let doh = &dout.row(l1)[cs..cs + dkc];
            for l2 in 0..rows {
                dau[l2] = dot(doh, &v.row(l2)[cs..cs + dkc]);
            }
            for l2 in 0..rows {
                let m = cache.mask.as_ref().map_or(1.0, |mk| mk[base + l2]);
                let a_used = arow[l2] * m;
                if a_used != 0.0 {
                    axpy(&mut dv.row_mut(l2)[cs..cs + dkc], a_used, doh);
                }
                datt[l2] = dau[l2] * m;
            }
            softmax_bwd_row(arow, &datt, &mut ds);
            let qh: Vec<f64> = q.row(l1)[cs..cs + dkc].to_vec();
            let dqh = &mut dq.row_mut(l1)[cs..cs + dkc];
            for l2 in 0..rows {
                let g = scale * ds[l2];
                if g != 0.0 {
                    axpy(dqh, g, &k.row(l2)[cs..cs + dkc]);
                    axpy(&mut dk.row_mut(l2)[cs..cs + dkc], g, &qh);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (rows, heads, d) = (4, 2, 6);
        let q = SeqMat { rows, cols: d, data: randn(rows * d, &mut rng) };
        let k = SeqMat { rows, cols: d, data: randn(rows * d, &mut rng) };
        let v = SeqMat { rows, cols: d, data: randn(rows * d, &mut rng) };
        let u = randn(rows * d, &mut rng);
        let scale = 1.0 / (3.0f64).sqrt();
        let eval = |q: &SeqMat, k: &SeqMat, v: &SeqMat| {
            let mut out = SeqMat::zeros(rows, d);
            attn_fwd(q, k, v, heads, scale, None, &mut out);
            out.data.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut out = SeqMat::zeros(rows, d);
        let cache = attn_fwd(&q, &k, &v, heads, scale, None, &mut out);
        let dout = SeqMat { rows, cols: d, data: u.clone() };
        let mut dq = SeqMat::zeros(rows, d);
        let mut dk = SeqMat::zeros(rows, d);
        let mut dv = SeqMat::zeros(rows, d);
        attn_bwd(&cache, &q, &k, &v, heads, scale, &dout, &mut dq, &mut dk, &mut dv);
        let h = 1e-6;
        for i in 0..rows * d {
            for (which, analytic) in [(0, dq.data[i]), (1, dk.data[i]), (2, dv.data[i])] {
                let (mut qp, mut kp, mut vp) = (q.clone(), k.clone(), v.clone());
                let (mut qm, mut km, mut vm) = (q.clone(), k.clone(), v.clone());
                match which {
                    0 => {
                        qp.data[i] += h;
                        qm.data[i] -= h;
                    }
                    1 => {
                        kp.data[i] += h;
                        km.data[i] -= h;
                    }
                    _ => {
                        vp.data[i] += h;
                        vm.data[i] -= h;
                    }
                }
                let fd = (eval(&qp, &kp, &vp) - eval(&qm, &km, &vm)) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()),
                    "input {which} coord {i}: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn rows_mix_only_value_content() {
        // With a single head and uniform keys, attention averages values.
        let rows = 3;
        let q = SeqMat::zeros(rows, 2);
        let k = SeqMat::zeros(rows, 2);
        let mut v = SeqMat::zeros(rows, 2);
        for l in 0..rows {
            v.row_mut(l)[0] = l as f64;
            v.row_mut(l)[1] = 1.0;
        }
        let mut out = SeqMat::zeros(rows, 2);
        attn_fwd(&q, &k, &v, 1, 1.0, None, &mut out);
        for l in 0..rows {
            assert!((out.row(l)[0] - 1.0).abs() < 1e-12);
            assert!((out.row(l)[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_is_seeded_and_rescales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rows, d) = (5, 4);
        let q = SeqMat { rows, cols: d, data: randn(rows * d, &mut rng) };
        let k = SeqMat { rows, cols: d, data: randn(rows * d, &mut rng) };
        let v = SeqMat { rows, cols: d, data: randn(rows * d, &mut rng) };
        let run = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut out = SeqMat::zeros(rows, d);
            let cache = attn_fwd(&q, &k, &v, 2, 0.5, Some((0.4, &mut r)), &mut out);
            (out, cache)
        };
        let (o1, c1) = run(11);
        let (o2, _) = run(11);
        let (o3, _) = run(12);
        assert_eq!(o1.data, o2.data);
        assert_ne!(o1.data, o3.data);
        let mask = c1.mask.unwrap();
        let expected = 1.0 / 0.6;
        assert!(mask.iter().all(|&m| m == 0.0 || (m - expected).abs() < 1e-15));
        assert!(mask.iter().any(|&m| m == 0.0), "p=0.4 over 50 draws should drop something");
    }
}
