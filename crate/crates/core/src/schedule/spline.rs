//! Ridge-regularized cubic B-spline smoother for the per-noise-level loss
//! profile. The adaptive schedule needs a smooth estimate of L(t) on [0,1]
//! whose derivative can be taken analytically; a clamped cubic basis with a
//! handful of equispaced interior knots is plenty for that.

use super::ScheduleError;

const DEGREE: usize = 3;

#[derive(Debug, Clone)]
pub struct RidgeSpline {
    tau: Vec<f64>,  // clamped knot vector on [0,1]
    coef: Vec<f64>, // one coefficient per basis function
}

/// Knot span index for x in [0,1]: the unique non-degenerate interval
/// [tau_j, tau_{j+1}) containing x, with the right endpoint closed.
fn find_span(tau: &[f64], n_basis: usize, x: f64) -> usize {
    if x >= 1.0 {
        return n_basis - 1;
    }
    let mut j = DEGREE;
    while j + 1 < n_basis && tau[j + 1] <= x {
        j += 1;
    }
    j
}

/// The `p + 1` basis values that are non-zero on span `j`, i.e.
/// `N_{j-p..=j, p}(x)` (triangular recurrence, no zero denominators for
/// valid spans).
fn basis_funs(tau: &[f64], j: usize, x: f64, p: usize) -> Vec<f64> {
    let mut n = vec![0.0; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    n[0] = 1.0;
    for r in 1..=p {
        left[r] = x - tau[j + 1 - r];
        right[r] = tau[j + r] - x;
        let mut saved = 0.0;
        for k in 0..r {
            let temp = n[k] / (right[k + 1] + left[r - k]);
            n[k] = saved + right[k + 1] * temp;
            saved = left[r - k] * temp;
        }
        n[r] = saved;
    }
    n
}

/// Dense Cholesky solve of the (small, SPD) normal equations.
fn cholesky_solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<(), ScheduleError> {
    let n = b.len();
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= a[i][k] * a[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(ScheduleError::ParameterOutOfRange {
                        name: "spline normal equations (not positive definite)",
                        value: s,
                    });
                }
                a[i][i] = s.sqrt();
            } else {
                a[i][j] = s / a[j][j];
            }
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i][k] * b[k];
        }
        b[i] = s / a[i][i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k][i] * b[k];
        }
        b[i] = s / a[i][i];
    }
    Ok(())
}

impl RidgeSpline {
    /// Least-squares fit of `(t, y)` pairs with `interior_knots` equispaced
    /// interior knots and ridge penalty `lambda` on the coefficients. A tiny
    /// floor on `lambda` keeps the normal equations positive definite even
    /// when some basis functions see no data.
    pub fn fit(
        points: &[(f64, f64)],
        interior_knots: usize,
        lambda: f64,
    ) -> Result<Self, ScheduleError> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(ScheduleError::ParameterOutOfRange { name: "ridge lambda", value: lambda });
        }
        let n_basis = interior_knots + DEGREE + 1;
        if points.len() < n_basis {
            return Err(ScheduleError::InsufficientData { have: points.len(), need: n_basis });
        }
        let mut tau = vec![0.0; DEGREE + 1];
        for i in 1..=interior_knots {
            tau.push(i as f64 / (interior_knots + 1) as f64);
        }
        tau.extend(std::iter::repeat(1.0).take(DEGREE + 1));

        let lambda = lambda.max(1e-10);
        let mut a = vec![vec![0.0; n_basis]; n_basis];
        let mut b = vec![0.0; n_basis];
        for &(t, y) in points {
            if !(0.0..=1.0).contains(&t) {
                return Err(ScheduleError::ParameterOutOfRange { name: "loss sample t", value: t });
            }
            if !y.is_finite() {
                return Err(ScheduleError::NonFiniteLoss { t, loss: y });
            }
            let j = find_span(&tau, n_basis, t);
            let n = basis_funs(&tau, j, t, DEGREE);
            for (r, nr) in n.iter().enumerate() {
                let ir = j - DEGREE + r;
                b[ir] += nr * y;
                for (c, nc) in n.iter().enumerate() {
                    a[ir][j - DEGREE + c] += nr * nc;
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        cholesky_solve(&mut a, &mut b)?;
        Ok(Self { tau, coef: b })
    }

    fn n_basis(&self) -> usize {
        self.coef.len()
    }

    pub fn value(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let j = find_span(&self.tau, self.n_basis(), t);
        let n = basis_funs(&self.tau, j, t, DEGREE);
        n.iter().enumerate().map(|(r, nr)| nr * self.coef[j - DEGREE + r]).sum()
    }

    /// Analytic derivative: the derivative of a degree-3 spline is a
    /// degree-2 spline with differenced coefficients.
    pub fn derivative(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let j = find_span(&self.tau, self.n_basis(), t);
        let n2 = basis_funs(&self.tau, j, t, DEGREE - 1);
        let mut acc = 0.0;
        for (r, nr) in n2.iter().enumerate() {
            let i = j - (DEGREE - 1) + r; // basis N_{i, 2}
            let denom = self.tau[i + DEGREE] - self.tau[i];
            if denom > 0.0 {
                let d = DEGREE as f64 * (self.coef[i] - self.coef[i - 1]) / denom;
                acc += d * nr;
            }
        }
        acc
    }
}
