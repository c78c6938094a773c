//! Shape-preserving piecewise-cubic interpolation (Fritsch-Carlson slopes
//! with three-point edge rules). Monotone input data yields a monotone
//! interpolant, which is what lets the adaptive schedule invert its sample
//! CDF and re-interpolate noise levels without overshoot.

use super::ScheduleError;

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>, // endpoint-corrected tangents
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-sided three-point tangent estimate, clipped so the first interval
/// stays shape-preserving.
fn edge_tangent(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if sign(d) != sign(m0) {
        0.0
    } else if sign(m0) != sign(m1) && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl MonotoneCubic {
    /// Builds the interpolant. Requires at least two nodes with strictly
    /// increasing x and finite values.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, ScheduleError> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(ScheduleError::ParameterOutOfRange {
                name: "interpolation nodes",
                value: xs.len() as f64,
            });
        }
        for w in xs.windows(2) {
            if !(w[1] > w[0]) {
                return Err(ScheduleError::ParameterOutOfRange { name: "node abscissa", value: w[1] });
            }
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(ScheduleError::ParameterOutOfRange { name: "node value", value: f64::NAN });
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = ys.windows(2).zip(&h).map(|(w, h)| (w[1] - w[0]) / h).collect();
        let mut ds = vec![0.0; n];
        if n == 2 {
            ds[0] = m[0];
            ds[1] = m[0];
        } else {
            for i in 1..n - 1 {
                // Zero or opposing secants force a flat tangent; otherwise a
                // weighted harmonic mean keeps the cubic inside the data.
                if sign(m[i - 1]) != sign(m[i]) || m[i - 1] == 0.0 || m[i] == 0.0 {
                    ds[i] = 0.0;
                } else {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    ds[i] = (w1 + w2) / (w1 / m[i - 1] + w2 / m[i]);
                }
            }
            ds[0] = edge_tangent(h[0], h[1], m[0], m[1]);
            ds[n - 1] = edge_tangent(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Ok(Self { xs, ys, ds })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    pub fn nodes(&self) -> (&[f64], &[f64]) {
        (&self.xs, &self.ys)
    }

    /// Index of the interval containing x (x clamped to the domain).
    fn interval(&self, x: f64) -> (usize, f64) {
        let (lo, hi) = self.domain();
        let x = x.clamp(lo, hi);
        let n = self.xs.len();
        let k = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        (k, x)
    }

    /// Interpolated value; node values are reproduced exactly.
    pub fn value(&self, x: f64) -> f64 {
        let (k, x) = self.interval(x);
        if x == self.xs[k] {
            return self.ys[k];
        }
        if x == self.xs[k + 1] {
            return self.ys[k + 1];
        }
        let h = self.xs[k + 1] - self.xs[k];
        let s = (x - self.xs[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.ys[k]
            + (s3 - 2.0 * s2 + s) * h * self.ds[k]
            + (-2.0 * s3 + 3.0 * s2) * self.ys[k + 1]
            + (s3 - s2) * h * self.ds[k + 1]
    }

    /// Derivative of the interpolant.
    pub fn derivative(&self, x: f64) -> f64 {
        let (k, x) = self.interval(x);
        let h = self.xs[k + 1] - self.xs[k];
        let s = (x - self.xs[k]) / h;
        let s2 = s * s;
        (6.0 * s2 - 6.0 * s) * (self.ys[k] / h)
            + (3.0 * s2 - 4.0 * s + 1.0) * self.ds[k]
            + (-6.0 * s2 + 6.0 * s) * (self.ys[k + 1] / h)
            + (3.0 * s2 - 2.0 * s) * self.ds[k + 1]
    }
}
