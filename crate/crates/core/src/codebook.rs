//! Token codebook: a raw |V| x d table of embeddings. The sphere model only
//! ever consumes the *normalized* rows, so the raw table is unconstrained
//! during optimization; normalization happens at lookup. A consequence worth
//! keeping in mind: the pullback of a loss through the lookup is always
//! tangential to the raw row, so plain gradient steps grow the row norm
//! monotonically (`|e'|^2 = |e|^2 + lr^2 |grad|^2`), and an optional
//! reprojection can undo that growth.

use crate::geometry::SpherePoint;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodebookError {
    #[error("token index {index} out of range for vocabulary of {vocab_size}")]
    IndexOutOfRange { index: usize, vocab_size: usize },
    #[error("non-finite score at index {index}")]
    NonFiniteLogits { index: usize },
    #[error("embedding row {index} has near-zero norm {norm:.3e}")]
    ZeroVector { index: usize, norm: f64 },
    #[error("malformed codebook bytes: {reason}")]
    Malformed { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vocab_size: usize,
    dim: usize,
    raw: Vec<f64>, // row-major |V| x d
}

/// Index of the largest finite score, breaking ties toward the lowest index.
pub fn argmax_lowest_index(scores: &[f64]) -> Result<usize, CodebookError> {
    if scores.is_empty() {
        return Err(CodebookError::Malformed { reason: "empty score row".into() });
    }
    let mut best = 0usize;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(CodebookError::NonFiniteLogits { index: i });
        }
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

impl Codebook {
    /// Gaussian init followed by row normalization, so raw rows start on the
    /// sphere and drift off it only through optimizer updates.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        assert!(vocab_size >= 2, "a usable vocabulary has at least two tokens");
        assert!(dim >= 2, "embeddings need at least two dimensions");
        let mut raw = vec![0.0; vocab_size * dim];
        for row in raw.chunks_mut(dim) {
            loop {
                for x in row.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
                let n = crate::geometry::norm(row);
                if n > crate::geometry::EPS_ZERO {
                    for x in row.iter_mut() {
                        *x /= n;
                    }
                    break;
                }
            }
        }
        Self { vocab_size, dim, raw }
    }

    /// Wraps an existing table. Shape must match and rows must be finite.
    pub fn from_raw(vocab_size: usize, dim: usize, raw: Vec<f64>) -> Result<Self, CodebookError> {
        if raw.len() != vocab_size * dim || vocab_size < 2 || dim < 2 {
            return Err(CodebookError::Malformed {
                reason: format!("shape {}x{} vs {} values", vocab_size, dim, raw.len()),
            });
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(CodebookError::Malformed { reason: format!("non-finite value at {i}") });
        }
        Ok(Self { vocab_size, dim, raw })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    /// Mutable access for the optimizer. Callers must keep values finite.
    pub fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.raw
    }

    pub fn raw_row(&self, v: usize) -> Result<&[f64], CodebookError> {
        if v >= self.vocab_size {
            return Err(CodebookError::IndexOutOfRange { index: v, vocab_size: self.vocab_size });
        }
        Ok(&self.raw[v * self.dim..(v + 1) * self.dim])
    }

    /// Normalized row as a sphere point. Errors if the raw row collapsed.
    pub fn embed(&self, v: usize) -> Result<SpherePoint, CodebookError> {
        let row = self.raw_row(v)?;
        SpherePoint::new(row.to_vec())
            .map_err(|_| CodebookError::ZeroVector { index: v, norm: crate::geometry::norm(row) })
    }

    /// All normalized rows, row-major. The sampler re-reads this every model
    /// evaluation, so it is materialized once per call site.
    pub fn normalized_rows(&self) -> Result<Vec<f64>, CodebookError> {
        let mut out = vec![0.0; self.raw.len()];
        for (v, (src, dst)) in
            self.raw.chunks(self.dim).zip(out.chunks_mut(self.dim)).enumerate()
        {
            let n = crate::geometry::norm(src);
            if n <= crate::geometry::EPS_ZERO {
                return Err(CodebookError::ZeroVector { index: v, norm: n });
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s / n;
            }
        }
        Ok(out)
    }

    /// Nearest token to `z` by inner product with the normalized rows
    /// (equivalently, smallest geodesic distance). Ties break low.
    pub fn decode_nearest(&self, z: &SpherePoint) -> Result<usize, CodebookError> {
        if z.dim() != self.dim {
            return Err(CodebookError::Malformed {
                reason: format!("query dim {} vs codebook dim {}", z.dim(), self.dim),
            });
        }
        let mut scores = Vec::with_capacity(self.vocab_size);
        for v in 0..self.vocab_size {
            let row = self.raw_row(v)?;
            let n = crate::geometry::norm(row);
            if n <= crate::geometry::EPS_ZERO {
                return Err(CodebookError::ZeroVector { index: v, norm: n });
            }
            scores.push(crate::geometry::dot(z.coords(), row) / n);
        }
        argmax_lowest_index(&scores)
    }

    /// Renormalizes every raw row onto the sphere (undoing optimizer-driven
    /// norm growth). Off by default in training.
    pub fn reproject(&mut self) -> Result<(), CodebookError> {
        for (v, row) in self.raw.chunks_mut(self.dim).enumerate() {
            let n = crate::geometry::norm(row);
            if n <= crate::geometry::EPS_ZERO {
                return Err(CodebookError::ZeroVector { index: v, norm: n });
            }
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        Ok(())
    }

    /// Pulls a gradient w.r.t. the normalized row back to the raw row:
    /// `(upstream - e_hat <e_hat, upstream>) / |e|`. The result is exactly
    /// orthogonal to the raw row (the lookup is scale-invariant).
    pub fn normalize_vjp(&self, v: usize, upstream: &[f64]) -> Result<Vec<f64>, CodebookError> {
        let row = self.raw_row(v)?;
        if upstream.len() != self.dim {
            return Err(CodebookError::Malformed {
                reason: format!("upstream dim {} vs {}", upstream.len(), self.dim),
            });
        }
        let n = crate::geometry::norm(row);
        if n <= crate::geometry::EPS_ZERO {
            return Err(CodebookError::ZeroVector { index: v, norm: n });
        }
        let unit: Vec<f64> = row.iter().map(|x| x / n).collect();
        let along = crate::geometry::dot(&unit, upstream);
        Ok(upstream.iter().zip(&unit).map(|(u, e)| (u - along * e) / n).collect())
    }

    /// Serialized form: |V| and d as little-endian 64-bit integers, then the
    /// raw table as little-endian 64-bit floats, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.raw.len());
        out.extend_from_slice(&(self.vocab_size as i64).to_le_bytes());
        out.extend_from_slice(&(self.dim as i64).to_le_bytes());
        for v in &self.raw {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodebookError> {
        if bytes.len() < 16 {
            return Err(CodebookError::Malformed { reason: "missing header".into() });
        }
        let vocab = i64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let dim = i64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if vocab < 2 || dim < 2 {
            return Err(CodebookError::Malformed {
                reason: format!("implausible shape {vocab}x{dim}"),
            });
        }
        let (vocab, dim) = (vocab as usize, dim as usize);
        let need = 16 + 8 * vocab * dim;
        if bytes.len() != need {
            return Err(CodebookError::Malformed {
                reason: format!("expected {need} bytes, got {}", bytes.len()),
            });
        }
        let raw: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_raw(vocab, dim, raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dot, norm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_book(seed: u64) -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Codebook::init(6, 8, &mut rng)
    }

    #[test]
    fn init_rows_are_unit_norm_and_seeded() {
        let a = small_book(1);
        let b = small_book(1);
        let c = small_book(2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for v in 0..a.vocab_size() {
            assert!((norm(a.raw_row(v).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_normalizes_scaled_rows() {
        let mut book = small_book(3);
        for x in book.raw_mut()[0..8].iter_mut() {
            *x *= 7.5;
        }
        let e = book.embed(0).unwrap();
        assert!((norm(e.coords()) - 1.0).abs() < 1e-12);
        assert!(matches!(book.embed(6), Err(CodebookError::IndexOutOfRange { .. })));
    }

    #[test]
    fn degenerate_row_is_reported() {
        let mut book = small_book(4);
        for x in book.raw_mut()[8..16].iter_mut() {
            *x = 0.0;
        }
        assert!(matches!(book.embed(1), Err(CodebookError::ZeroVector { index: 1, .. })));
        assert!(book.normalized_rows().is_err());
        assert!(book.reproject().is_err());
    }

    #[test]
    fn decode_prefers_lowest_index_on_ties() {
        // Duplicate rows 1 and 2: querying their direction must return 1.
        let mut book = small_book(5);
        let row1: Vec<f64> = book.raw_row(1).unwrap().to_vec();
        book.raw_mut()[16..24].copy_from_slice(&row1);
        let q = SpherePoint::new(row1).unwrap();
        assert_eq!(book.decode_nearest(&q).unwrap(), 1);
    }

    #[test]
    fn decode_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let book = Codebook::init(40, 16, &mut rng);
        for _ in 0..200 {
            let z = crate::geometry::sample_uniform(16, &mut rng);
            let got = book.decode_nearest(&z).unwrap();
            let mut best = (f64::NEG_INFINITY, 0);
            for v in 0..book.vocab_size() {
                let s = dot(z.coords(), book.embed(v).unwrap().coords());
                if s > best.0 {
                    best = (s, v);
                }
            }
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn argmax_rejects_non_finite() {
        assert!(matches!(
            argmax_lowest_index(&[0.1, f64::NAN, 0.3]),
            Err(CodebookError::NonFiniteLogits { index: 1 })
        ));
        assert_eq!(argmax_lowest_index(&[2.0, 2.0, 1.0]).unwrap(), 0);
    }

    #[test]
    fn lookup_gradient_is_orthogonal_to_raw_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut book = Codebook::init(5, 12, &mut rng);
        // Push a row off the sphere so orthogonality is about the raw row,
        // not the unit one.
        for x in book.raw_mut()[0..12].iter_mut() {
            *x *= 3.0;
        }
        for _ in 0..100 {
            let upstream: Vec<f64> =
                (0..12).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let g = book.normalize_vjp(0, &upstream).unwrap();
            let e = book.raw_row(0).unwrap();
            let rel = dot(e, &g).abs() / (norm(e) * norm(&g)).max(1e-300);
            assert!(rel <= 1e-6, "tangentiality violated: {rel}");
        }
    }

    #[test]
    fn plain_sgd_step_grows_norm_pythagorean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let book = Codebook::init(5, 16, &mut rng);
        for lr in [1e-3, 0.1, 1.0] {
            let upstream: Vec<f64> =
                (0..16).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let g = book.normalize_vjp(2, &upstream).unwrap();
            let e = book.raw_row(2).unwrap();
            let stepped: Vec<f64> = e.iter().zip(&g).map(|(x, gi)| x - lr * gi).collect();
            let want = dot(e, e) + lr * lr * dot(&g, &g);
            let got = dot(&stepped, &stepped);
            assert!(
                (got - want).abs() <= 1e-9 * want,
                "norm growth identity off: {got} vs {want}"
            );
        }
    }

    #[test]
    fn normalize_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut book = Codebook::init(4, 6, &mut rng);
        for x in book.raw_mut()[6..12].iter_mut() {
            *x *= 2.3;
        }
        let upstream: Vec<f64> =
            (0..6).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let g = book.normalize_vjp(1, &upstream).unwrap();
        let h = 1e-6;
        let base: Vec<f64> = book.raw_row(1).unwrap().to_vec();
        for i in 0..6 {
            let eval = |row: &[f64]| {
                let n = norm(row);
                row.iter().zip(&upstream).map(|(x, u)| x / n * u).sum::<f64>()
            };
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn reproject_restores_unit_rows() {
        let mut book = small_book(10);
        for x in book.raw_mut().iter_mut() {
            *x *= 1.7;
        }
        book.reproject().unwrap();
        for v in 0..book.vocab_size() {
            assert!((norm(book.raw_row(v).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn byte_round_trip_is_bitwise() {
        let book = small_book(11);
        let bytes = book.to_bytes();
        assert_eq!(&bytes[0..8], &(6i64).to_le_bytes());
        assert_eq!(&bytes[8..16], &(8i64).to_le_bytes());
        let back = Codebook::from_bytes(&bytes).unwrap();
        assert_eq!(back, book);
        assert!(Codebook::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Codebook::from_bytes(&bytes[..12]).is_err());
    }
}
