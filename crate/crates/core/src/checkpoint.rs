//! Versioned binary checkpoint container. A checkpoint is self-describing:
//! it embeds the model and trainer configs, so loading never needs the
//! original config file.
//!
//! Layout: magic, format version, a length-prefixed JSON header (configs,
//! counters, RNG position, schedule, refit state, loss window), then binary
//! blocks: named f32 tensors for the denoiser weights and their optimizer
//! moments and EMA shadow, and little-endian f64 matrices for the codebook
//! and its moments and shadow. All trainer-side f32 quantities live exactly
//! on the f32 grid, so the 32-bit round trip is bit-exact.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, CodebookError};
use crate::denoiser::{DenoiserConfig, DenoiserError, ParameterSet, Tensor};
use crate::schedule::{LossBuffer, RefitState, Schedule, ScheduleError};
use crate::trainer::{TrainConfig, TrainState};

const MAGIC: &[u8; 9] = b"SFLOWCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
    #[error("checkpoint layout mismatch: {reason}")]
    LayoutMismatch { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// JSON part of the container: everything small enough that a text encoding
/// costs nothing. serde_json emits shortest round-tripping decimal floats,
/// so the finite f64 fields survive exactly.
#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: DenoiserConfig,
    train: TrainConfig,
    step: u64,
    recorded: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: u128,
    schedule: Schedule,
    refit_state: RefitState,
    buffer: LossBuffer,
}

/// A full training snapshot plus the configs needed to keep going.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let s = &self.state;
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: s.step,
            recorded: s.recorded,
            rng_seed: s.rng.get_seed(),
            rng_stream: s.rng.get_stream(),
            rng_word_pos: s.rng.get_word_pos(),
            schedule: s.schedule.clone(),
            refit_state: s.refit_state.clone(),
            buffer: s.buffer.clone(),
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);

        write_tensor_block(&mut out, s.params.tensors());
        write_tensor_block(&mut out, s.ema.tensors());
        write_moment_block(&mut out, &s.moments_m);
        write_moment_block(&mut out, &s.moments_v);
        write_codebook(&mut out, &s.codebook);
        write_codebook(&mut out, &s.ema_codebook);
        write_f64_vec(&mut out, &s.codebook_m);
        write_f64_vec(&mut out, &s.codebook_v);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;

        let params = ParameterSet::from_tensors(read_tensor_block(&mut r)?);
        let ema = ParameterSet::from_tensors(read_tensor_block(&mut r)?);
        let moments_m = read_moment_block(&mut r)?;
        let moments_v = read_moment_block(&mut r)?;
        let codebook = read_codebook(&mut r)?;
        let ema_codebook = read_codebook(&mut r)?;
        let codebook_m = read_f64_vec(&mut r)?;
        let codebook_v = read_f64_vec(&mut r)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt {
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }

        check_alignment(&params, &ema, &moments_m, &moments_v)?;
        if codebook.raw().len() != codebook_m.len() || codebook.raw().len() != codebook_v.len() {
            return Err(CheckpointError::LayoutMismatch {
                reason: "codebook moment length differs from codebook".into(),
            });
        }

        let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(header.rng_word_pos);

        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            state: TrainState {
                params,
                codebook,
                moments_m,
                moments_v,
                codebook_m,
                codebook_v,
                ema,
                ema_codebook,
                step: header.step,
                schedule: header.schedule,
                buffer: header.buffer,
                refit_state: header.refit_state,
                recorded: header.recorded,
                rng,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_alignment(
    params: &ParameterSet,
    ema: &ParameterSet,
    m: &[Vec<f64>],
    v: &[Vec<f64>],
) -> Result<(), CheckpointError> {
    let n = params.tensors().len();
    if ema.tensors().len() != n || m.len() != n || v.len() != n {
        return Err(CheckpointError::LayoutMismatch {
            reason: "tensor counts differ between weights, ema, and moments".into(),
        });
    }
    for (i, t) in params.tensors().iter().enumerate() {
        let e = &ema.tensors()[i];
        if e.name != t.name || e.shape != t.shape {
            return Err(CheckpointError::LayoutMismatch {
                reason: format!("ema tensor {i} ({}) differs from weights ({})", e.name, t.name),
            });
        }
        if m[i].len() != t.data.len() || v[i].len() != t.data.len() {
            return Err(CheckpointError::LayoutMismatch {
                reason: format!("moment {i} length differs from tensor {}", t.name),
            });
        }
    }
    Ok(())
}

fn write_tensor_block(out: &mut Vec<u8>, tensors: &[Tensor]) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u64).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

fn read_tensor_block(r: &mut Reader) -> Result<Vec<Tensor>, CheckpointError> {
    let count = r.u64()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
            CheckpointError::Corrupt { reason: "tensor name is not UTF-8".into() }
        })?;
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = if shape.is_empty() { 0 } else { shape.iter().product() };
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()? as f64);
        }
        tensors.push(Tensor { name, shape, data });
    }
    Ok(tensors)
}

fn write_moment_block(out: &mut Vec<u8>, moments: &[Vec<f64>]) {
    out.extend_from_slice(&(moments.len() as u64).to_le_bytes());
    for m in moments {
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for &x in m {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

fn read_moment_block(r: &mut Reader) -> Result<Vec<Vec<f64>>, CheckpointError> {
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u64()? as usize;
        let mut m = Vec::with_capacity(len);
        for _ in 0..len {
            m.push(r.f32()? as f64);
        }
        out.push(m);
    }
    Ok(out)
}

/// Raw matrix: |V| then d as u64, then row-major f64, all little-endian.
fn write_codebook(out: &mut Vec<u8>, cb: &Codebook) {
    out.extend_from_slice(&(cb.vocab_size() as u64).to_le_bytes());
    out.extend_from_slice(&(cb.dim() as u64).to_le_bytes());
    for &x in cb.raw() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_codebook(r: &mut Reader) -> Result<Codebook, CheckpointError> {
    let vocab = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let mut raw = Vec::with_capacity(vocab * dim);
    for _ in 0..vocab * dim {
        raw.push(r.f64()?);
    }
    Ok(Codebook::from_raw(vocab, dim, raw)?)
}

fn write_f64_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for &x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64_vec(r: &mut Reader) -> Result<Vec<f64>, CheckpointError> {
    let len = r.u64()? as usize;
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(r.f64()?);
    }
    Ok(v)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt { reason: "unexpected end of file".into() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
