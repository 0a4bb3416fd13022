//! Natural cubic spline basis.
//!
//! The basis is the cubic B-spline basis on the full knot sequence with the
//! first column removed, projected onto the null space of the second-derivative
//! constraints at the two boundary knots. Outside the boundary knots each
//! column continues linearly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasisSpec {
    pub df: usize,
    pub interior_knots: Vec<f64>,
    pub boundary_knots: [f64; 2],
}

impl SplineBasisSpec {
    /// Interior knots at the `j/df` quantiles of `x`, boundary knots at its range.
    pub fn from_data(x: &[f64], df: usize) -> Result<Self> {
        if df < 1 {
            return Err(Error::Parameter("spline df must be at least 1".into()));
        }
        if x.is_empty() {
            return Err(Error::Parameter("cannot place spline knots on empty data".into()));
        }
        let mut sorted: Vec<f64> = x.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if !(hi > lo) {
            return Err(Error::Parameter(format!(
                "degenerate spline knots: all values equal {lo}"
            )));
        }
        let interior = (1..df)
            .map(|j| quantile_sorted(&sorted, j as f64 / df as f64))
            .collect();
        let spec = SplineBasisSpec {
            df,
            interior_knots: interior,
            boundary_knots: [lo, hi],
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.df < 1 {
            return Err(Error::Parameter("spline df must be at least 1".into()));
        }
        let [a, b] = self.boundary_knots;
        if !(b > a) {
            return Err(Error::Parameter(
                "boundary knots must be distinct and increasing".into(),
            ));
        }
        if self.interior_knots.len() != self.df - 1 {
            return Err(Error::Parameter(format!(
                "spline with df={} needs {} interior knots, got {}",
                self.df,
                self.df - 1,
                self.interior_knots.len()
            )));
        }
        let mut prev = a;
        for &k in &self.interior_knots {
            if !(k > prev) || !(k < b) {
                return Err(Error::Parameter(format!(
                    "degenerate spline knots: interior knot {k} not strictly inside ({a}, {b}) or not increasing"
                )));
            }
            prev = k;
        }
        Ok(())
    }

    fn knot_vector(&self) -> Vec<f64> {
        let [a, b] = self.boundary_knots;
        let mut t = vec![a; ORDER];
        t.extend_from_slice(&self.interior_knots);
        t.extend(std::iter::repeat_n(b, ORDER));
        t
    }
}

/// Linear-interpolation quantile of pre-sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Values (or derivatives) of all B-splines of order `ORDER` at `x`.
/// `x` must lie within the boundary knots.
fn bspline_row(t: &[f64], x: f64, deriv: usize) -> Vec<f64> {
    let n_basis = t.len() - ORDER;
    // Span containing x; the right boundary belongs to the last non-empty span.
    let last = t.len() - ORDER;
    let mut span = ORDER - 1;
    while span < last - 1 && x >= t[span + 1] {
        span += 1;
    }
    let mut vals = vec![0.0; t.len() - 1];
    vals[span] = 1.0;
    for k in 2..=ORDER {
        let use_deriv = k > ORDER - deriv;
        let mut next = vec![0.0; t.len() - k];
        for (i, slot) in next.iter_mut().enumerate() {
            let d1 = t[i + k - 1] - t[i];
            let d2 = t[i + k] - t[i + 1];
            let left = if d1 > 0.0 { vals[i] / d1 } else { 0.0 };
            let right = if d2 > 0.0 { vals[i + 1] / d2 } else { 0.0 };
            *slot = if use_deriv {
                (k - 1) as f64 * (left - right)
            } else {
                (x - t[i]) * left + (t[i + k] - x) * right
            };
        }
        vals = next;
    }
    vals.truncate(n_basis);
    vals
}

/// Householder reflector `(v, tau)` such that `(I - tau v v') x = beta e1`.
fn householder(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (vec![0.0; x.len()], 0.0);
    }
    let beta = if x[0] >= 0.0 { -norm } else { norm };
    let mut v = x.to_vec();
    v[0] -= beta;
    let vtv: f64 = v.iter().map(|a| a * a).sum();
    (v, 2.0 / vtv)
}

/// Evaluates the natural cubic spline basis at `x` (rows) for `spec` (columns).
pub fn natural_spline_basis(x: &[f64], spec: &SplineBasisSpec) -> Result<DMatrix<f64>> {
    spec.check()?;
    let t = spec.knot_vector();
    let [a, b] = spec.boundary_knots;
    let m = t.len() - ORDER - 1;

    // Constraint rows (second derivatives at the boundaries), first column dropped.
    let ca = &bspline_row(&t, a, 2)[1..];
    let cb = &bspline_row(&t, b, 2)[1..];
    // Householder QR of the m x 2 constraint matrix (transposed constraints).
    let mut cols = [ca.to_vec(), cb.to_vec()];
    let mut reflectors = Vec::with_capacity(2);
    for j in 0..2 {
        let (v, tau) = householder(&cols[j][j..]);
        for col in cols.iter_mut().skip(j) {
            let dot: f64 = v.iter().zip(&col[j..]).map(|(p, q)| p * q).sum();
            for (ci, vi) in col[j..].iter_mut().zip(&v) {
                *ci -= tau * dot * vi;
            }
        }
        reflectors.push((j, v, tau));
    }

    let value_a = &bspline_row(&t, a, 0)[1..];
    let value_b = &bspline_row(&t, b, 0)[1..];
    let slope_a = &bspline_row(&t, a, 1)[1..];
    let slope_b = &bspline_row(&t, b, 1)[1..];

    let mut out = DMatrix::zeros(x.len(), spec.df);
    let mut row = vec![0.0; m];
    for (r, &xi) in x.iter().enumerate() {
        if !xi.is_finite() {
            return Err(Error::Row {
                row: r + 1,
                message: format!("non-finite spline argument {xi}"),
            });
        }
        if xi < a {
            for j in 0..m {
                row[j] = value_a[j] + (xi - a) * slope_a[j];
            }
        } else if xi > b {
            for j in 0..m {
                row[j] = value_b[j] + (xi - b) * slope_b[j];
            }
        } else {
            row.copy_from_slice(&bspline_row(&t, xi, 0)[1..]);
        }
        // row <- row * H1 * H2
        for (j, v, tau) in &reflectors {
            let dot: f64 = v.iter().zip(&row[*j..]).map(|(p, q)| p * q).sum();
            for (ri, vi) in row[*j..].iter_mut().zip(v) {
                *ri -= tau * dot * vi;
            }
        }
        for c in 0..spec.df {
            out[(r, c)] = row[c + 2];
        }
    }
    Ok(out)
}
