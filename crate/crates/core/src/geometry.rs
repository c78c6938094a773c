//! Primitives for the unit hypersphere S^{d-1}: points, tangent vectors,
//! exponential/logarithm maps, geodesic interpolation and the conditional
//! velocity field that transports noise toward a clean embedding.
//!
//! Everything here is 64-bit. Angles are always recovered through a clamped
//! arccos, small angles switch to series limits, and near-antipodal pairs are
//! a hard error because the log map loses uniqueness there.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Norms at or below this are treated as the zero vector.
pub const EPS_ZERO: f64 = 1e-12;
/// Below this angle (or interpolation offset) the trig ratios switch to
/// their series limits to avoid 0/0.
pub const EPS_TAYLOR: f64 = 1e-8;
/// Angles within this of pi make the log map ill-posed.
pub const EPS_ANTIPODAL: f64 = 1e-6;
/// Largest |<v,p>| accepted before a vector is rejected as non-tangent.
pub const EPS_TANGENT: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("cannot normalize a near-zero vector (norm {norm:.3e})")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector is not tangent at the base point (|<v,p>| = {dot:.3e})")]
    NotTangent { dot: f64 },
    #[error("points are antipodal within tolerance (angle {angle:.9})")]
    AntipodalPoints { angle: f64 },
    #[error("interpolation parameter {value} outside [0,1]")]
    ParameterOutOfRange { value: f64 },
    #[error("conditional velocity undefined at alpha = {alpha} (needs alpha < 1)")]
    AlphaAtOne { alpha: f64 },
}

/// A point on S^{d-1}. Construction normalizes, so the unit-norm invariant
/// holds for every value of this type.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    coords: Vec<f64>,
}

impl SpherePoint {
    /// Normalizes `v` onto the sphere. Errors if `v` is too short to carry
    /// a direction.
    pub fn new(v: Vec<f64>) -> Result<Self, GeometryError> {
        let n = norm(&v);
        if n <= EPS_ZERO {
            return Err(GeometryError::ZeroVector { norm: n });
        }
        let mut coords = v;
        scale(&mut coords, 1.0 / n);
        Ok(Self { coords })
    }

    /// Wraps coordinates that are already unit-norm (outputs of the maps
    /// below). Debug builds verify the invariant.
    pub(crate) fn from_unit(coords: Vec<f64>) -> Self {
        debug_assert!((norm(&coords) - 1.0).abs() < 1e-9);
        Self { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// A tangent vector at `base`, i.e. orthogonal to it. Construction projects
/// out any numerical drift along the base direction, so the stored vector is
/// tangent to machine precision (far inside the 1e-9 contract).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: SpherePoint,
    vec: Vec<f64>,
}

impl TangentVector {
    /// Attaches `v` to `base`. Errors if `v` has a component along `base`
    /// larger than `EPS_TANGENT`; smaller components are projected away.
    pub fn new(base: SpherePoint, v: Vec<f64>) -> Result<Self, GeometryError> {
        if base.dim() != v.len() {
            return Err(GeometryError::DimensionMismatch { left: base.dim(), right: v.len() });
        }
        let d = dot(base.coords(), &v);
        if d.abs() > EPS_TANGENT {
            return Err(GeometryError::NotTangent { dot: d });
        }
        let mut vec = v;
        for (vi, pi) in vec.iter_mut().zip(base.coords()) {
            *vi -= d * pi;
        }
        Ok(Self { base, vec })
    }

    /// Used by the maps below, whose outputs are tangent by construction.
    pub(crate) fn from_parts(base: SpherePoint, vec: Vec<f64>) -> Self {
        debug_assert!(dot(base.coords(), &vec).abs() < 1e-9 * (1.0 + norm(&vec)));
        Self { base, vec }
    }

    pub fn base(&self) -> &SpherePoint {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    /// Euclidean norm of the tangent vector; for `log_map` outputs this is
    /// the geodesic distance.
    pub fn norm(&self) -> f64 {
        norm(&self.vec)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn scale(v: &mut [f64], s: f64) {
    for x in v {
        *x *= s;
    }
}

fn renormalize(mut v: Vec<f64>) -> Result<SpherePoint, GeometryError> {
    let n = norm(&v);
    if n <= EPS_ZERO {
        return Err(GeometryError::ZeroVector { norm: n });
    }
    scale(&mut v, 1.0 / n);
    Ok(SpherePoint::from_unit(v))
}

fn check_dims(p: &SpherePoint, q: &SpherePoint) -> Result<(), GeometryError> {
    if p.dim() != q.dim() {
        return Err(GeometryError::DimensionMismatch { left: p.dim(), right: q.dim() });
    }
    Ok(())
}

/// Angle between unit vectors as atan2(|b - <a,b> a|, <a,b>), with the
/// clamped cosine and the rejection norm (numerically sin of the angle).
/// Arccos of the inner product loses half the mantissa on nearly parallel
/// pairs; the rejection form stays accurate over the whole range.
pub(crate) fn stable_angle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let u = dot(a, b).clamp(-1.0, 1.0);
    let mut s2 = 0.0;
    for (ai, bi) in a.iter().zip(b) {
        let r = bi - u * ai;
        s2 += r * r;
    }
    let s = s2.sqrt();
    (s.atan2(u), u, s)
}

/// Angle between two points, in [0, pi].
pub fn geodesic_distance(p: &SpherePoint, q: &SpherePoint) -> Result<f64, GeometryError> {
    check_dims(p, q)?;
    Ok(stable_angle(p.coords(), q.coords()).0)
}

/// Exponential map: walks from `p` along tangent direction `v` for geodesic
/// length `|v|`. `v` must be tangent at `p` within `EPS_TANGENT`.
pub fn exp_map(p: &SpherePoint, v: &[f64]) -> Result<SpherePoint, GeometryError> {
    if p.dim() != v.len() {
        return Err(GeometryError::DimensionMismatch { left: p.dim(), right: v.len() });
    }
    let align = dot(p.coords(), v);
    if align.abs() > EPS_TANGENT {
        return Err(GeometryError::NotTangent { dot: align });
    }
    let theta = norm(v);
    if theta < EPS_TAYLOR {
        // Series limit: cos(t) ~ 1, sin(t)/t ~ 1.
        let out: Vec<f64> = p.coords().iter().zip(v).map(|(pi, vi)| pi + vi).collect();
        return renormalize(out);
    }
    let (c, s) = (theta.cos(), theta.sin() / theta);
    let out: Vec<f64> = p.coords().iter().zip(v).map(|(pi, vi)| c * pi + s * vi).collect();
    renormalize(out)
}

/// Logarithm map: the tangent vector at `p` pointing toward `q` with norm
/// equal to the geodesic distance. Errors when the pair is within
/// `EPS_ANTIPODAL` of antipodal, where the direction is not unique.
pub fn log_map(p: &SpherePoint, q: &SpherePoint) -> Result<TangentVector, GeometryError> {
    check_dims(p, q)?;
    let (omega, cos_omega, sin_omega) = stable_angle(p.coords(), q.coords());
    if omega >= std::f64::consts::PI - EPS_ANTIPODAL {
        return Err(GeometryError::AntipodalPoints { angle: omega });
    }
    let vec: Vec<f64> = if omega < EPS_TAYLOR {
        // Series limit: omega/sin(omega) ~ 1 and q - cos(omega) p ~ q - <q,p> p.
        q.coords().iter().zip(p.coords()).map(|(qi, pi)| qi - cos_omega * pi).collect()
    } else {
        let k = omega / sin_omega;
        q.coords().iter().zip(p.coords()).map(|(qi, pi)| k * (qi - cos_omega * pi)).collect()
    };
    // Scrub the residual normal component so |v| reports the distance and
    // tangency holds to machine precision.
    let drift = dot(p.coords(), &vec);
    let vec: Vec<f64> = vec.iter().zip(p.coords()).map(|(vi, pi)| vi - drift * pi).collect();
    Ok(TangentVector::from_parts(p.clone(), vec))
}

/// Geodesic interpolation from `p` (t = 0) to `q` (t = 1).
pub fn slerp(p: &SpherePoint, q: &SpherePoint, t: f64) -> Result<SpherePoint, GeometryError> {
    check_dims(p, q)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::ParameterOutOfRange { value: t });
    }
    // Exact endpoints regardless of rounding in the trig path.
    if t == 0.0 {
        return Ok(p.clone());
    }
    if t == 1.0 {
        return Ok(q.clone());
    }
    let (omega, _, sin_omega) = stable_angle(p.coords(), q.coords());
    if omega >= std::f64::consts::PI - EPS_ANTIPODAL {
        return Err(GeometryError::AntipodalPoints { angle: omega });
    }
    if omega < EPS_TAYLOR {
        // Nearly coincident points: chordal blend, then project back.
        let out: Vec<f64> = p
            .coords()
            .iter()
            .zip(q.coords())
            .map(|(pi, qi)| (1.0 - t) * pi + t * qi)
            .collect();
        return renormalize(out);
    }
    let s = sin_omega;
    let (a, b) = ((((1.0 - t) * omega).sin()) / s, ((t * omega).sin()) / s);
    let out: Vec<f64> = p.coords().iter().zip(q.coords()).map(|(pi, qi)| a * pi + b * qi).collect();
    renormalize(out)
}

/// Uniform draw on S^{d-1}: a standard Gaussian pushed through normalization.
/// The zero-norm rejection branch exists for completeness; hitting it has
/// probability zero in 64-bit arithmetic.
pub fn sample_uniform<R: Rng + ?Sized>(d: usize, rng: &mut R) -> SpherePoint {
    assert!(d >= 2, "sphere points need at least two coordinates");
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(p) = SpherePoint::new(v) {
            return p;
        }
    }
}

/// Velocity of the geodesic interpolant toward clean point `z1`, evaluated
/// at the current point `z_t` with noise level `alpha` and rate `alpha_dot`:
/// `(alpha_dot / (1 - alpha)) * log_{z_t}(z1)`.
pub fn conditional_velocity(
    z_t: &SpherePoint,
    z_1: &SpherePoint,
    alpha: f64,
    alpha_dot: f64,
) -> Result<TangentVector, GeometryError> {
    if alpha >= 1.0 {
        return Err(GeometryError::AlphaAtOne { alpha });
    }
    let g = log_map(z_t, z_1)?;
    let k = alpha_dot / (1.0 - alpha);
    let vec: Vec<f64> = g.vec().iter().map(|v| k * v).collect();
    Ok(TangentVector::from_parts(g.base().clone(), vec))
}

/// Value and reverse-mode pullback of `slerp(p, q, t)` with respect to both
/// endpoints, treating them as free ambient vectors. The training path only
/// consumes the `q` side (the clean embedding); the `p` side is kept for
/// symmetry and checked against finite differences in the tests.
pub fn slerp_vjp(
    p: &SpherePoint,
    q: &SpherePoint,
    t: f64,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), GeometryError> {
    check_dims(p, q)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::ParameterOutOfRange { value: t });
    }
    let d = p.dim();
    if upstream.len() != d {
        return Err(GeometryError::DimensionMismatch { left: d, right: upstream.len() });
    }
    let (omega, _, sin_omega) = stable_angle(p.coords(), q.coords());
    if omega >= std::f64::consts::PI - EPS_ANTIPODAL {
        return Err(GeometryError::AntipodalPoints { angle: omega });
    }
    if omega < EPS_TAYLOR {
        // Chordal branch: slerp reduces to normalize((1-t) p + t q).
        let mixed: Vec<f64> = p
            .coords()
            .iter()
            .zip(q.coords())
            .map(|(pi, qi)| (1.0 - t) * pi + t * qi)
            .collect();
        let n = norm(&mixed);
        if n <= EPS_ZERO {
            return Err(GeometryError::ZeroVector { norm: n });
        }
        let y: Vec<f64> = mixed.iter().map(|m| m / n).collect();
        // dL/dmixed = (upstream - y <y, upstream>) / n, then the linear blend.
        let yg = dot(&y, upstream);
        let gm: Vec<f64> = upstream.iter().zip(&y).map(|(u, yi)| (u - yg * yi) / n).collect();
        let gp: Vec<f64> = gm.iter().map(|g| (1.0 - t) * g).collect();
        let gq: Vec<f64> = gm.iter().map(|g| t * g).collect();
        return Ok((gp, gq));
    }
    let s = sin_omega;
    let a = ((1.0 - t) * omega).sin() / s;
    let b = (t * omega).sin() / s;
    // Derivatives of the blend weights in omega.
    let da = ((1.0 - t) * ((1.0 - t) * omega).cos() * s - ((1.0 - t) * omega).sin() * omega.cos())
        / (s * s);
    let db = (t * (t * omega).cos() * s - (t * omega).sin() * omega.cos()) / (s * s);
    // z = a p + b q; domega/dp = -q/s, domega/dq = -p/s (ambient gradients
    // of arccos<p,q>).
    let up = dot(p.coords(), upstream);
    let uq = dot(q.coords(), upstream);
    let chain = da * up + db * uq; // <dz/domega, upstream>
    let gp: Vec<f64> = upstream
        .iter()
        .zip(q.coords())
        .map(|(u, qi)| a * u - chain * qi / s)
        .collect();
    let gq: Vec<f64> = upstream
        .iter()
        .zip(p.coords())
        .map(|(u, pi)| b * u - chain * pi / s)
        .collect();
    Ok((gp, gq))
}
