//! Dense kernels for the denoiser backbones. Everything is f64 and loops are
//! arranged so the inner dimension is contiguous: forward and weight-gradient
//! kernels accumulate along rows of the [in][out] weight layout (independent
//! lanes, so the compiler can vectorize without reassociating), and the
//! input-gradient kernel uses an explicitly unrolled dot with a fixed
//! accumulation order, keeping results bitwise reproducible.

/// Row-major matrix of sequence activations (rows = positions).
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SeqMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Eight-lane unrolled dot product. The lane sums are combined in a fixed
/// order, so results are deterministic (and differ from a naive sequential
/// sum only in rounding).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [0.0f64; 8];
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for j in 0..8 {
            acc[j] = ac[j].mul_add(bc[j], acc[j]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail = a[i].mul_add(b[i], tail);
    }
    (((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))) + tail
}

#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi.mul_add(a, *yi);
    }
}

/// `out = x W (+ bias)` with `w` stored [in][out] row-major.
pub fn linear_fwd(x: &SeqMat, w: &[f64], bias: Option<&[f64]>, out: &mut SeqMat) {
    let (n_in, n_out) = (x.cols, out.cols);
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert_eq!(x.rows, out.rows);
    for l in 0..x.rows {
        let xr = x.row(l);
        let or = out.row_mut(l);
        match bias {
            Some(b) => or.copy_from_slice(b),
            None => or.fill(0.0),
        }
        for (i, &xi) in xr.iter().enumerate() {
            axpy(or, xi, &w[i * n_out..(i + 1) * n_out]);
        }
    }
}

/// `dx += dy W^T`. Accumulates so gradients from several consumers of the
/// same activation can be summed in place.
pub fn linear_bwd_x(dy: &SeqMat, w: &[f64], dx: &mut SeqMat) {
    let (n_in, n_out) = (dx.cols, dy.cols);
    debug_assert_eq!(w.len(), n_in * n_out);
    for l in 0..dy.rows {
        let dyr = dy.row(l);
        let dxr = dx.row_mut(l);
        for (i, dxi) in dxr.iter_mut().enumerate() {
            *dxi += dot(dyr, &w[i * n_out..(i + 1) * n_out]);
        }
    }
}

/// `dw += x^T dy`, `db += column sums of dy`.
pub fn linear_bwd_w(x: &SeqMat, dy: &SeqMat, dw: &mut [f64], db: Option<&mut [f64]>) {
    let (n_in, n_out) = (x.cols, dy.cols);
    debug_assert_eq!(dw.len(), n_in * n_out);
    for l in 0..x.rows {
        let xr = x.row(l);
        let dyr = dy.row(l);
        for (i, &xi) in xr.iter().enumerate() {
            axpy(&mut dw[i * n_out..(i + 1) * n_out], xi, dyr);
        }
    }
    if let Some(db) = db {
        debug_assert_eq!(db.len(), n_out);
        for l in 0..dy.rows {
            for (bi, dyi) in db.iter_mut().zip(dy.row(l)) {
                *bi += dyi;
            }
        }
    }
}

/// In-place stable softmax of one row; returns nothing, caller keeps `row`.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax pullback: `dx = p .* (dy - <dy, p>)`.
pub fn softmax_bwd_row(p: &[f64], dy: &[f64], dx: &mut [f64]) {
    let inner = dot(p, dy);
    for ((d, &pi), &dyi) in dx.iter_mut().zip(p).zip(dy) {
        *d = pi * (dyi - inner);
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Layer norm without affine parameters. Returns the normalized rows; the
/// per-row inverse standard deviation is written to `rstd` for the backward
/// pass (the normalized output doubles as x-hat).
pub fn layer_norm_fwd(x: &SeqMat, eps: f64, out: &mut SeqMat, rstd: &mut [f64]) {
    for l in 0..x.rows {
        let xr = x.row(l);
        let mean = xr.iter().sum::<f64>() / xr.len() as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / xr.len() as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd[l] = r;
        for (o, &v) in out.row_mut(l).iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
    }
}

/// Layer norm pullback given the normalized output x-hat.
pub fn layer_norm_bwd(xhat: &SeqMat, rstd: &[f64], dy: &SeqMat, dx: &mut SeqMat) {
    let n = xhat.cols as f64;
    for l in 0..xhat.rows {
        let xh = xhat.row(l);
        let dyr = dy.row(l);
        let mean_dy = dyr.iter().sum::<f64>() / n;
        let mean_dy_xh = dot(dyr, xh) / n;
        for ((d, &h), &g) in dx.row_mut(l).iter_mut().zip(xh).zip(dyr) {
            *d = rstd[l] * (g - mean_dy - h * mean_dy_xh);
        }
    }
}

/// `y = x / max(|x|, eps)` over a slice. Returns the raw norm so the
/// backward pass can pick the right branch.
pub fn unit_norm_fwd(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    let denom = n.max(eps);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v / denom;
    }
    n
}

/// Pullback of `unit_norm_fwd`; `y` is the forward output, `n` its raw norm.
pub fn unit_norm_bwd(y: &[f64], n: f64, eps: f64, dy: &[f64], dx: &mut [f64]) {
    if n > eps {
        let inner = dot(y, dy);
        for ((d, &yi), &g) in dx.iter_mut().zip(y).zip(dy) {
            *d = (g - inner * yi) / n;
        }
    } else {
        for (d, &g) in dx.iter_mut().zip(dy) {
            *d = g / eps;
        }
    }
}

/// Rotary tables for `seq_len` positions and head dimension `head_dim`
/// (must be even): entry `(l, i)` rotates coordinate pair `(2i, 2i+1)` by
/// `l * 10000^{-2i/head_dim}`.
pub struct RopeTable {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub half: usize,
}

impl RopeTable {
    pub fn new(seq_len: usize, head_dim: usize) -> Self {
        assert!(head_dim % 2 == 0);
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for l in 0..seq_len {
            for i in 0..half {
                let freq = 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
                let theta = l as f64 * freq;
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates one head slice in place for position `l`.
    pub fn apply(&self, l: usize, head: &mut [f64]) {
        let base = l * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (x0, x1) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = c * x0 - s * x1;
            head[2 * i + 1] = s * x0 + c * x1;
        }
    }

    /// Inverse rotation (the transpose), used by the backward pass.
    pub fn apply_inverse(&self, l: usize, head: &mut [f64]) {
        let base = l * self.half;
        for i in 0..self.half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let (x0, x1) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = c * x0 + s * x1;
            head[2 * i + 1] = -s * x0 + c * x1;
        }
    }
}
