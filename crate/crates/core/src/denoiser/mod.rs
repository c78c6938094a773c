//! Denoising network: maps a sequence of sphere points plus a time value to
//! per-position vocabulary logits. Two interchangeable backbones share the
//! attention core, rotary position code, and timestep embedder:
//!
//! * `standard`: pre-norm residual transformer; the time signal modulates
//!   each block through zero-initialized scale/shift/gate vectors.
//! * `s_arch`: normalization replaces additive residuals; queries/keys are
//!   unit-normalized and rescaled by learned per-dimension scales, hidden
//!   states are re-projected to the sphere after every sublayer, and the time
//!   signal enters through gate offsets from a zero-initialized map.
//!
//! Gradients are computed by hand-written reverse mode over a per-call
//! activation cache; no autodiff framework is involved.

pub mod math;

mod attn;
mod s_arch;
mod standard;
mod timestep;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use math::{layer_norm_bwd, layer_norm_fwd, linear_bwd_w, linear_bwd_x, linear_fwd, RopeTable, SeqMat};

pub use timestep::features as timestep_features;

/// Epsilon inside the layer-norm variance square root.
pub(crate) const LN_EPS: f64 = 1e-5;
/// Floor in `u / max(norm(u), eps)` projections.
pub(crate) const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {reason}")]
    InvalidConfig { reason: String },
    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("parameter set is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("input rows have width {got}, model width is {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("input sequence is empty")]
    EmptyInput,
    #[error("time value {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },
    #[error("non-finite activation at {site}")]
    NonFiniteActivation { site: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Standard,
    SArch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub arch: Arch,
    /// Model width; also the sphere dimension of the latents.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub cond_dim: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_gamma_init")]
    pub gamma_init: f64,
    #[serde(default = "default_one")]
    pub s_qk_init: f64,
    #[serde(default = "default_one")]
    pub s_z_init: f64,
}

fn default_gamma_init() -> f64 {
    0.05
}

fn default_one() -> f64 {
    1.0
}

impl DenoiserConfig {
    /// Desk-scale default: width 64, 4 blocks, 4 heads.
    pub fn desk(arch: Arch, vocab_size: usize) -> Self {
        Self {
            arch,
            dim: 64,
            layers: 4,
            heads: 4,
            cond_dim: 64,
            vocab_size,
            dropout: 0.0,
            gamma_init: 0.05,
            s_qk_init: 1.0,
            s_z_init: 1.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.dim
    }

    /// Stored-scale unit `b = 1/sqrt(dim)`: per-dimension scale tensors hold
    /// multiples of `b` and are mapped to their effective value on use.
    pub fn base_scale(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let fail = |reason: String| Err(DenoiserError::InvalidConfig { reason });
        if self.dim < 2 {
            return fail(format!("dim {} < 2", self.dim));
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dim {} must be even for rotary pairs", self.head_dim()));
        }
        if self.cond_dim < 2 || self.cond_dim % 2 != 0 {
            return fail(format!("cond_dim {} must be even and >= 2", self.cond_dim));
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, v) in
            [("gamma_init", self.gamma_init), ("s_qk_init", self.s_qk_init), ("s_z_init", self.s_z_init)]
        {
            if !v.is_finite() || v <= 0.0 {
                return fail(format!("{name} = {v} must be finite and positive"));
            }
        }
        Ok(())
    }
}

/// Named parameter tensor. `shape` is `[in, out]` for matrices (row-major,
/// input index slow) and `[n]` for vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of all learnable tensors. Order is fixed by the
/// config's layout, so gradient vectors index into it positionally.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Zeroed per-tensor gradient buffers, aligned with `tensors()`.
    pub fn grads_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    /// Rounds every value to the nearest f32. Keeping the working copy on
    /// the f32 grid makes the 32-bit checkpoint round-trip bit-exact.
    pub fn quantize_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Activations recorded by a training-mode forward pass.
pub struct ForwardCache {
    z: SeqMat,
    time: timestep::TimeCache,
    body: CacheBody,
}

enum CacheBody {
    Standard { blocks: Vec<standard::BlockCache>, xhat_f: SeqMat, rstd_f: Vec<f64> },
    SArch { blocks: Vec<s_arch::BlockCache>, raw_logits: SeqMat },
}

pub struct Denoiser {
    cfg: DenoiserConfig,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig) -> Result<Self, DenoiserError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Canonical tensor names and shapes, in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, c, hid, v) = (self.cfg.dim, self.cfg.cond_dim, self.cfg.hidden_dim(), self.cfg.vocab_size);
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("time.w1".into(), vec![c, c]),
            ("time.b1".into(), vec![c]),
            ("time.w2".into(), vec![c, c]),
            ("time.b2".into(), vec![c]),
        ];
        for l in 0..self.cfg.layers {
            let mut push = |suffix: &str, shape: Vec<usize>| out.push((format!("blk{l}.{suffix}"), shape));
            match self.cfg.arch {
                Arch::Standard => {
                    push("attn.wq", vec![d, d]);
                    push("attn.bq", vec![d]);
                    push("attn.wk", vec![d, d]);
                    push("attn.bk", vec![d]);
                    push("attn.wv", vec![d, d]);
                    push("attn.bv", vec![d]);
                    push("attn.wo", vec![d, d]);
                    push("attn.bo", vec![d]);
                    push("mlp.w1", vec![d, hid]);
                    push("mlp.b1", vec![hid]);
                    push("mlp.w2", vec![hid, d]);
                    push("mlp.b2", vec![d]);
                    push("ada.w", vec![c, 6 * d]);
                    push("ada.b", vec![6 * d]);
                }
                Arch::SArch => {
                    push("attn.wq", vec![d, d]);
                    push("attn.wk", vec![d, d]);
                    push("attn.wv", vec![d, d]);
                    push("attn.wo", vec![d, d]);
                    push("attn.s_qk", vec![d]);
                    push("mlp.w1", vec![d, hid]);
                    push("mlp.w2", vec![hid, d]);
                    push("mlp.s_fc", vec![hid]);
                    push("gate.gamma_a", vec![d]);
                    push("gate.gamma_m", vec![d]);
                    push("time.w_delta", vec![c, 2 * d]);
                }
            }
        }
        out.push(("head.w_lm".into(), vec![d, v]));
        if self.cfg.arch == Arch::SArch {
            out.push(("head.s_z".into(), vec![v]));
        }
        out
    }

    /// Fresh parameters. Standard backbone: centered Gaussian weights
    /// (std 0.02), zero biases, zero modulation map so every block starts as
    /// the identity. S-arch: each output unit's fan-in vector is a normalized
    /// Gaussian, scales start at their stored unit `b`, and the time map is
    /// zero so conditioning starts inert.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParameterSet {
        let b = self.cfg.base_scale();
        let mut tensors = Vec::new();
        for (name, shape) in self.tensor_layout() {
            let n: usize = shape.iter().product();
            let is_matrix = shape.len() == 2;
            let zero_init = name.contains("ada.") || name.contains("w_delta") || name.contains(".b");
            let data = if zero_init {
                vec![0.0; n]
            } else if is_matrix {
                let mut w: Vec<f64> =
                    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                match self.cfg.arch {
                    Arch::Standard => {
                        for v in &mut w {
                            *v *= 0.02;
                        }
                    }
                    Arch::SArch => {
                        let (n_in, n_out) = (shape[0], shape[1]);
                        for o in 0..n_out {
                            let norm: f64 =
                                (0..n_in).map(|i| w[i * n_out + o] * w[i * n_out + o]).sum::<f64>().sqrt();
                            if norm > 0.0 {
                                for i in 0..n_in {
                                    w[i * n_out + o] /= norm;
                                }
                            }
                        }
                    }
                }
                w
            } else if name.ends_with("s_fc") {
                vec![1.0; n]
            } else {
                // s_qk, gamma_a, gamma_m, s_z: stored value b, effective
                // value restored by the (init/b) rescale at use sites.
                vec![b; n]
            };
            tensors.push(Tensor { name, shape, data });
        }
        ParameterSet { tensors }
    }

    fn check_params(&self, p: &ParameterSet) -> Result<(), DenoiserError> {
        let layout = self.tensor_layout();
        for (i, (name, shape)) in layout.iter().enumerate() {
            let t = p.tensors.get(i).filter(|t| &t.name == name).ok_or_else(|| {
                DenoiserError::MissingTensor { name: name.clone() }
            })?;
            let n: usize = shape.iter().product();
            if &t.shape != shape || t.data.len() != n {
                return Err(DenoiserError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape.clone(),
                });
            }
        }
        if p.tensors.len() != layout.len() {
            let extra = &p.tensors[layout.len()];
            return Err(DenoiserError::ShapeMismatch {
                name: extra.name.clone(),
                expected: vec![],
                got: extra.shape.clone(),
            });
        }
        Ok(())
    }

    fn check_input(&self, z: &SeqMat, t: f64) -> Result<(), DenoiserError> {
        if z.rows == 0 {
            return Err(DenoiserError::EmptyInput);
        }
        if z.cols != self.cfg.dim {
            return Err(DenoiserError::InputWidth { expected: self.cfg.dim, got: z.cols });
        }
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(DenoiserError::TimeOutOfRange { t });
        }
        Ok(())
    }

    /// Inference forward: dropout disabled, no cache kept.
    pub fn forward(&self, p: &ParameterSet, z: &SeqMat, t: f64) -> Result<SeqMat, DenoiserError> {
        self.run(p, z, t, None).map(|(logits, _)| logits)
    }

    /// Training forward: keeps the activation cache for `backward` and, when
    /// the config enables dropout, draws masks from a rng seeded with
    /// `dropout_seed` so steps are reproducible.
    pub fn forward_train(
        &self,
        p: &ParameterSet,
        z: &SeqMat,
        t: f64,
        dropout_seed: u64,
    ) -> Result<(SeqMat, ForwardCache), DenoiserError> {
        use rand::SeedableRng;
        let rng = (self.cfg.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(dropout_seed));
        self.run(p, z, t, rng)
    }

    fn run(
        &self,
        p: &ParameterSet,
        z: &SeqMat,
        t: f64,
        mut drop_rng: Option<ChaCha8Rng>,
    ) -> Result<(SeqMat, ForwardCache), DenoiserError> {
        self.check_input(z, t)?;
        self.check_params(p)?;
        let cfg = &self.cfg;
        let rope = RopeTable::new(z.rows, cfg.head_dim());
        let ten = |name: &str| -> &[f64] { &p.get(name).expect("layout checked").data };
        let time = timestep::time_fwd(
            t,
            cfg.cond_dim,
            ten("time.w1"),
            ten("time.b1"),
            ten("time.w2"),
            ten("time.b2"),
        );
        let mut h = z.clone();
        let (logits, body) = match cfg.arch {
            Arch::Standard => {
                let mut blocks = Vec::with_capacity(cfg.layers);
                for l in 0..cfg.layers {
                    let ix = standard::Idx::fetch(p, l);
                    let drop = drop_rng.as_mut().map(|r| (cfg.dropout, r));
                    blocks.push(standard::block_fwd(cfg, p, &ix, &mut h, &time.cvec, &rope, drop));
                }
                let mut xhat_f = SeqMat::zeros(h.rows, h.cols);
                let mut rstd_f = vec![0.0; h.rows];
                layer_norm_fwd(&h, LN_EPS, &mut xhat_f, &mut rstd_f);
                let mut logits = SeqMat::zeros(h.rows, cfg.vocab_size);
                linear_fwd(&xhat_f, ten("head.w_lm"), None, &mut logits);
                (logits, CacheBody::Standard { blocks, xhat_f, rstd_f })
            }
            Arch::SArch => {
                let mut blocks = Vec::with_capacity(cfg.layers);
                for l in 0..cfg.layers {
                    let ix = s_arch::Idx::fetch(p, l);
                    let drop = drop_rng.as_mut().map(|r| (cfg.dropout, r));
                    blocks.push(s_arch::block_fwd(cfg, p, &ix, &mut h, &time.cvec, &rope, drop));
                }
                let mut raw = SeqMat::zeros(h.rows, cfg.vocab_size);
                linear_fwd(&h, ten("head.w_lm"), None, &mut raw);
                let s_z = ten("head.s_z");
                let zscale = cfg.s_z_init / cfg.base_scale();
                let mut logits = raw.clone();
                for l in 0..logits.rows {
                    for (x, &s) in logits.row_mut(l).iter_mut().zip(s_z) {
                        *x *= s * zscale;
                    }
                }
                (logits, CacheBody::SArch { blocks, raw_logits: raw })
            }
        };
        if logits.data.iter().any(|v| !v.is_finite()) {
            return Err(DenoiserError::NonFiniteActivation { site: "logits" });
        }
        Ok((logits, ForwardCache { z: z.clone(), time, body }))
    }

    /// Reverse mode over a cached forward. Returns per-tensor parameter
    /// gradients (aligned with `ParameterSet::tensors`) and the gradient with
    /// respect to the input latents.
    pub fn backward(
        &self,
        p: &ParameterSet,
        cache: &ForwardCache,
        dlogits: &SeqMat,
    ) -> Result<(Vec<Vec<f64>>, SeqMat), DenoiserError> {
        self.check_params(p)?;
        let cfg = &self.cfg;
        let rows = cache.z.rows;
        if dlogits.rows != rows || dlogits.cols != cfg.vocab_size {
            return Err(DenoiserError::ShapeMismatch {
                name: "upstream logits gradient".into(),
                expected: vec![rows, cfg.vocab_size],
                got: vec![dlogits.rows, dlogits.cols],
            });
        }
        let mut grads = p.grads_like();
        let rope = RopeTable::new(rows, cfg.head_dim());
        let mut dcvec = vec![0.0; cfg.cond_dim];
        let mut dh = SeqMat::zeros(rows, cfg.dim);
        let ten = |name: &str| -> &[f64] { &p.get(name).expect("layout checked").data };
        match &cache.body {
            CacheBody::Standard { blocks, xhat_f, rstd_f } => {
                let i_wlm = p.index_of("head.w_lm").expect("layout checked");
                linear_bwd_w(xhat_f, dlogits, &mut grads[i_wlm], None);
                let mut dxf = SeqMat::zeros(rows, cfg.dim);
                linear_bwd_x(dlogits, ten("head.w_lm"), &mut dxf);
                layer_norm_bwd(xhat_f, rstd_f, &dxf, &mut dh);
                for l in (0..cfg.layers).rev() {
                    let ix = standard::Idx::fetch(p, l);
                    standard::block_bwd(
                        cfg,
                        p,
                        &ix,
                        &mut grads,
                        &blocks[l],
                        &mut dh,
                        &mut dcvec,
                        &rope,
                        &cache.time.cvec,
                    );
                }
            }
            CacheBody::SArch { blocks, raw_logits } => {
                let zscale = cfg.s_z_init / cfg.base_scale();
                let s_z = ten("head.s_z");
                let h_final = &blocks.last().expect("layers >= 1").h2;
                {
                    let g_sz = &mut grads[p.index_of("head.s_z").expect("layout checked")];
                    for l in 0..rows {
                        for ((g, &dl), &raw) in
                            g_sz.iter_mut().zip(dlogits.row(l)).zip(raw_logits.row(l))
                        {
                            *g += dl * raw * zscale;
                        }
                    }
                }
                let mut draw = dlogits.clone();
                for l in 0..rows {
                    for (x, &s) in draw.row_mut(l).iter_mut().zip(s_z) {
                        *x *= s * zscale;
                    }
                }
                let i_wlm = p.index_of("head.w_lm").expect("layout checked");
                linear_bwd_w(h_final, &draw, &mut grads[i_wlm], None);
                linear_bwd_x(&draw, ten("head.w_lm"), &mut dh);
                for l in (0..cfg.layers).rev() {
                    let ix = s_arch::Idx::fetch(p, l);
                    let h_in = if l == 0 { &cache.z } else { &blocks[l - 1].h2 };
                    s_arch::block_bwd(
                        cfg,
                        p,
                        &ix,
                        &mut grads,
                        &blocks[l],
                        h_in,
                        &mut dh,
                        &mut dcvec,
                        &rope,
                        &cache.time.cvec,
                    );
                }
            }
        }
        // Timestep MLP grads go through temporaries because the gradient
        // store can only hand out one tensor at a time.
        let c = cfg.cond_dim;
        let (mut dw1, mut db1, mut dw2, mut db2) =
            (vec![0.0; c * c], vec![0.0; c], vec![0.0; c * c], vec![0.0; c]);
        timestep::time_bwd(&cache.time, ten("time.w1"), ten("time.w2"), &dcvec, &mut dw1, &mut db1, &mut dw2, &mut db2);
        for (name, src) in [("time.w1", dw1), ("time.b1", db1), ("time.w2", dw2), ("time.b2", db2)] {
            let g = &mut grads[p.index_of(name).expect("layout checked")];
            for (gi, si) in g.iter_mut().zip(src) {
                *gi += si;
            }
        }
        Ok((grads, dh))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_uniform;
    use math::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tiny(arch: Arch) -> DenoiserConfig {
        DenoiserConfig {
            arch,
            dim: 8,
            layers: 1,
            heads: 2,
            cond_dim: 8,
            vocab_size: 5,
            dropout: 0.0,
            gamma_init: 0.05,
            s_qk_init: 1.0,
            s_z_init: 1.0,
        }
    }

    fn latents(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> SeqMat {
        let mut m = SeqMat::zeros(rows, dim);
        for l in 0..rows {
            let p = sample_uniform(dim, rng);
            m.row_mut(l).copy_from_slice(p.coords());
        }
        m
    }

    /// Init plus small noise so every path (zero-initialized maps included)
    /// carries gradient. The time-map noise is kept small enough that the
    /// gate pre-activations stay well away from the |.| kink.
    fn noised_params(model: &Denoiser, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = model.init_params(&mut rng);
        for t in p.tensors_mut() {
            let std = if t.name.contains("w_delta") { 0.001 } else { 0.05 };
            for v in &mut t.data {
                *v += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> SeqMat {
        SeqMat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        }
    }

    fn locate(p: &ParameterSet, flat: usize) -> (usize, usize) {
        let mut rem = flat;
        for (i, t) in p.tensors().iter().enumerate() {
            if rem < t.data.len() {
                return (i, rem);
            }
            rem -= t.data.len();
        }
        unreachable!("flat index within n_params");
    }

    fn run_grad_check(arch: Arch) {
        let model = Denoiser::new(tiny(arch)).unwrap();
        let p = noised_params(&model, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = latents(3, 8, &mut rng);
        let t = 0.37;
        let upstream = rand_mat(3, 5, &mut rng);
        let loss = |p: &ParameterSet| -> f64 {
            let l = model.forward(p, &z, t).unwrap();
            dot(&l.data, &upstream.data)
        };
        let (logits, cache) = model.forward_train(&p, &z, t, 0).unwrap();
        assert_eq!(logits.data, model.forward(&p, &z, t).unwrap().data);
        let (grads, dz) = model.backward(&p, &cache, &upstream).unwrap();
        let h = 1e-5;
        let total = p.n_params();
        for _ in 0..200 {
            let (ti, off) = locate(&p, rng.gen_range(0..total));
            let mut pp = p.clone();
            pp.tensors_mut()[ti].data[off] += h;
            let mut pm = p.clone();
            pm.tensors_mut()[ti].data[off] -= h;
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let an = grads[ti][off];
            let abs = (fd - an).abs();
            let rel = abs / fd.abs().max(an.abs()).max(1e-12);
            assert!(
                abs <= 1e-6 || rel <= 1e-4,
                "{}[{off}]: fd {fd:.9e} analytic {an:.9e} rel {rel:.3e}",
                p.tensors()[ti].name
            );
        }
        let loss_z = |z: &SeqMat| -> f64 {
            let l = model.forward(&p, z, t).unwrap();
            dot(&l.data, &upstream.data)
        };
        for i in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[i] += h;
            let mut zm = z.clone();
            zm.data[i] -= h;
            let fd = (loss_z(&zp) - loss_z(&zm)) / (2.0 * h);
            let an = dz.data[i];
            let abs = (fd - an).abs();
            let rel = abs / fd.abs().max(an.abs()).max(1e-12);
            assert!(abs <= 1e-6 || rel <= 1e-4, "z[{i}]: fd {fd:.9e} analytic {an:.9e}");
        }
    }

    #[test]
    fn gradient_check_standard() {
        run_grad_check(Arch::Standard);
    }

    #[test]
    fn gradient_check_s_arch() {
        run_grad_check(Arch::SArch);
    }

    #[test]
    fn logits_shape_and_determinism() {
        for arch in [Arch::Standard, Arch::SArch] {
            let model = Denoiser::new(tiny(arch)).unwrap();
            let p = noised_params(&model, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let z = latents(7, 8, &mut rng);
            let a = model.forward(&p, &z, 0.5).unwrap();
            assert_eq!((a.rows, a.cols), (7, 5));
            let b = model.forward(&p, &z, 0.5).unwrap();
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn initial_logits_ignore_time() {
        // Both backbones start with zeroed time-modulation maps, so the only
        // time-dependent path is inert and logits are bit-identical across t.
        for arch in [Arch::Standard, Arch::SArch] {
            let model = Denoiser::new(tiny(arch)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let p = model.init_params(&mut rng);
            let z = latents(4, 8, &mut rng);
            let a = model.forward(&p, &z, 0.1).unwrap();
            let b = model.forward(&p, &z, 0.9).unwrap();
            assert_eq!(a.data, b.data);
        }
        // Once the map is non-zero the logits must depend on t.
        let model = Denoiser::new(tiny(Arch::SArch)).unwrap();
        let p = noised_params(&model, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = latents(4, 8, &mut rng);
        let a = model.forward(&p, &z, 0.1).unwrap();
        let b = model.forward(&p, &z, 0.9).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn s_arch_hidden_states_stay_on_sphere() {
        let cfg = DenoiserConfig {
            arch: Arch::SArch,
            dim: 16,
            layers: 3,
            heads: 2,
            cond_dim: 8,
            vocab_size: 7,
            ..tiny(Arch::SArch)
        };
        let model = Denoiser::new(cfg).unwrap();
        let p = noised_params(&model, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = latents(5, 16, &mut rng);
        let (_, cache) = model.forward_train(&p, &z, 0.6, 0).unwrap();
        let CacheBody::SArch { blocks, .. } = &cache.body else {
            panic!("s_arch cache expected");
        };
        for blk in blocks {
            for state in [&blk.h1, &blk.h2] {
                for l in 0..state.rows {
                    let n = dot(state.row(l), state.row(l)).sqrt();
                    assert!((n - 1.0).abs() < 1e-5, "post-residual row norm {n}");
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for arch in [Arch::Standard, Arch::SArch] {
            let model = Denoiser::new(tiny(arch)).unwrap();
            let p = noised_params(&model, 13);
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let z = latents(3, 8, &mut rng);
            let (_, cache) = model.forward_train(&p, &z, 0.4, 0).unwrap();
            let (grads, dz) = model.backward(&p, &cache, &SeqMat::zeros(3, 5)).unwrap();
            assert!(grads.iter().flatten().all(|&g| g == 0.0));
            assert!(dz.data.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn dropout_is_seeded_and_disabled_at_eval() {
        let cfg = DenoiserConfig { dropout: 0.3, ..tiny(Arch::Standard) };
        let model = Denoiser::new(cfg).unwrap();
        let p = noised_params(&model, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let z = latents(4, 8, &mut rng);
        let (a, _) = model.forward_train(&p, &z, 0.5, 42).unwrap();
        let (b, _) = model.forward_train(&p, &z, 0.5, 42).unwrap();
        let (c, _) = model.forward_train(&p, &z, 0.5, 43).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        assert_ne!(a.data, model.forward(&p, &z, 0.5).unwrap().data);
    }

    #[test]
    fn parameter_layout_matches_init() {
        let model = Denoiser::new(tiny(Arch::SArch)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = model.init_params(&mut rng);
        let layout = model.tensor_layout();
        assert_eq!(p.tensors().len(), layout.len());
        let b = model.config().base_scale();
        for (t, (name, shape)) in p.tensors().iter().zip(&layout) {
            assert_eq!(&t.name, name);
            assert_eq!(&t.shape, shape);
            if t.name.contains("w_delta") {
                assert!(t.data.iter().all(|&v| v == 0.0));
            } else if t.shape.len() == 2 {
                let (n_in, n_out) = (t.shape[0], t.shape[1]);
                for o in 0..n_out {
                    let norm: f64 =
                        (0..n_in).map(|i| t.data[i * n_out + o].powi(2)).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-12, "{} column {o} norm {norm}", t.name);
                }
            } else if t.name.ends_with("s_fc") {
                assert!(t.data.iter().all(|&v| v == 1.0));
            } else if !t.name.contains(".b") {
                assert!(t.data.iter().all(|&v| v == b), "{} should store b", t.name);
            }
        }
        let model = Denoiser::new(tiny(Arch::Standard)).unwrap();
        let p = model.init_params(&mut rng);
        for t in p.tensors() {
            if t.name.contains("ada") || t.name.contains(".b") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{} should be zero", t.name);
            } else {
                assert!(t.data.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn quantize_snaps_to_f32_grid() {
        let model = Denoiser::new(tiny(Arch::Standard)).unwrap();
        let mut p = noised_params(&model, 18);
        assert!(p.tensors().iter().flat_map(|t| &t.data).any(|&v| v != v as f32 as f64));
        p.quantize_to_f32();
        for t in p.tensors() {
            assert!(t.data.iter().all(|&v| v == v as f32 as f64));
        }
    }

    #[test]
    fn rejects_bad_inputs_and_configs() {
        assert!(matches!(
            Denoiser::new(DenoiserConfig { heads: 3, ..tiny(Arch::Standard) }),
            Err(DenoiserError::InvalidConfig { .. })
        ));
        assert!(matches!(
            Denoiser::new(DenoiserConfig { dim: 6, heads: 2, ..tiny(Arch::Standard) }),
            Err(DenoiserError::InvalidConfig { .. }) // head dim 3 is odd
        ));
        assert!(matches!(
            Denoiser::new(DenoiserConfig { dropout: 1.0, ..tiny(Arch::Standard) }),
            Err(DenoiserError::InvalidConfig { .. })
        ));

        let model = Denoiser::new(tiny(Arch::Standard)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let p = model.init_params(&mut rng);
        let z = latents(3, 8, &mut rng);
        assert!(matches!(
            model.forward(&p, &SeqMat::zeros(3, 9), 0.5),
            Err(DenoiserError::InputWidth { expected: 8, got: 9 })
        ));
        assert!(matches!(
            model.forward(&p, &SeqMat::zeros(0, 8), 0.5),
            Err(DenoiserError::EmptyInput)
        ));
        assert!(matches!(
            model.forward(&p, &z, 1.5),
            Err(DenoiserError::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            model.forward(&p, &z, f64::NAN),
            Err(DenoiserError::TimeOutOfRange { .. })
        ));

        let s_model = Denoiser::new(tiny(Arch::SArch)).unwrap();
        let sp = s_model.init_params(&mut rng);
        assert!(matches!(
            model.forward(&sp, &z, 0.5),
            Err(DenoiserError::MissingTensor { .. })
        ));

        let mut bad = model.init_params(&mut rng);
        bad.get_mut("head.w_lm").unwrap().data[0] = f64::NAN;
        assert!(matches!(
            model.forward(&bad, &z, 0.5),
            Err(DenoiserError::NonFiniteActivation { .. })
        ));

        let (_, cache) = model.forward_train(&p, &z, 0.5, 0).unwrap();
        assert!(matches!(
            model.backward(&p, &cache, &SeqMat::zeros(3, 9)),
            Err(DenoiserError::ShapeMismatch { .. })
        ));
    }
}
