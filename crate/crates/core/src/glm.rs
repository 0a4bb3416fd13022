//! Weighted logistic regression by iteratively reweighted least squares, and
//! the cluster-robust sandwich covariance of its coefficients.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fitted probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]` in the
/// working weights.
pub const PROB_CLAMP: f64 = 1e-10;
const MAX_HALVINGS: usize = 10;
/// Two-sided 97.5% standard normal quantile.
pub const Z_975: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Relative deviance change at which iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Drop collinear columns with a warning instead of failing.
    pub drop_aliased: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 25,
            drop_aliased: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmFit {
    /// One entry per design column; aliased columns hold 0.
    pub coefficients: DVector<f64>,
    /// `(X'WX)^-1` on the non-aliased columns, zero rows/columns for aliased ones.
    pub model_covariance: DMatrix<f64>,
    pub deviance: f64,
    pub converged: bool,
    /// Some fitted probability reached the clamp, i.e. (quasi-)separation.
    pub separated: bool,
    pub iterations: usize,
    pub column_names: Vec<String>,
    pub aliased: Vec<bool>,
    pub n_obs: usize,
}

impl GlmFit {
    pub fn active_columns(&self) -> Vec<usize> {
        (0..self.aliased.len()).filter(|&j| !self.aliased[j]).collect()
    }

    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.coefficients
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichCovariance {
    pub matrix: DMatrix<f64>,
    pub cluster_count: usize,
}

#[inline]
pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<()> {
    if x.nrows() != y.len() || y.len() != w.len() {
        return Err(Error::Parameter(format!(
            "dimension mismatch: X has {} rows, y {}, w {}",
            x.nrows(),
            y.len(),
            w.len()
        )));
    }
    if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Row {
            row: i + 1,
            message: format!("response must be 0 or 1, found {}", y[i]),
        });
    }
    if let Some(i) = w.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Row {
            row: i + 1,
            message: format!("weight must be finite and non-negative, found {}", w[i]),
        });
    }
    if let Some((i, _)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Row {
            row: i % x.nrows().max(1) + 1,
            message: "non-finite design value".into(),
        });
    }
    if !w.iter().any(|&v| v > 0.0) {
        return Err(Error::EmptyData("no row has a positive weight".into()));
    }
    Ok(())
}

/// Columns of `x` (restricted to rows with positive weight) that are linearly
/// dependent on earlier columns. Earlier columns are always kept.
fn aliased_columns(x: &DMatrix<f64>, w: &[f64]) -> Vec<bool> {
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| w[i] > 0.0).collect();
    let n = rows.len();
    let p = x.ncols();
    let mut a = DMatrix::from_fn(n, p, |i, j| x[(rows[i], j)]);
    let tol = 1e-10 * a.norm();
    let mut aliased = vec![false; p];
    let mut rank = 0;
    for j in 0..p {
        if rank >= n {
            aliased[j] = true;
            continue;
        }
        let norm = a.view((rank, j), (n - rank, 1)).norm();
        if norm <= tol {
            aliased[j] = true;
            continue;
        }
        // Householder reflector for a[rank.., j]
        let alpha = a[(rank, j)];
        let beta = if alpha >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (rank..n).map(|i| a[(i, j)]).collect();
        v[0] -= beta;
        let vtv: f64 = v.iter().map(|t| t * t).sum();
        let tau = 2.0 / vtv;
        for c in j..p {
            let dot: f64 = v.iter().enumerate().map(|(k, vk)| vk * a[(rank + k, c)]).sum();
            for (k, vk) in v.iter().enumerate() {
                a[(rank + k, c)] -= tau * dot * vk;
            }
        }
        rank += 1;
    }
    aliased
}

fn deviance(eta: &DVector<f64>, y: &[f64], w: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .zip(w)
        .filter(|(_, &wi)| wi > 0.0)
        .map(|((&e, &yi), &wi)| {
            let p = clamp_prob(logistic(e));
            -2.0 * wi * (yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
        })
        .sum()
}

/// `X' diag(d) X`
fn weighted_gram(x: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut xd = x.clone();
    for (mut row, &di) in xd.row_iter_mut().zip(d) {
        row *= di;
    }
    xd.tr_mul(x)
}

fn invert_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

fn embed(active: &[usize], p: usize, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p, p);
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            out[(i, j)] = m[(a, b)];
        }
    }
    out
}

fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    if cols.len() == x.ncols() {
        return x.clone();
    }
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

/// Maximizes the `w`-weighted Bernoulli log-likelihood of `y` given `x`.
pub fn fit_weighted_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    column_names: &[String],
    opts: &FitOptions,
) -> Result<GlmFit> {
    check_inputs(x, y, w)?;
    if column_names.len() != x.ncols() {
        return Err(Error::Schema(format!(
            "{} column names for {} design columns",
            column_names.len(),
            x.ncols()
        )));
    }
    let p = x.ncols();
    let aliased = aliased_columns(x, w);
    if aliased.iter().any(|&a| a) {
        let names: Vec<String> = aliased
            .iter()
            .zip(column_names)
            .filter(|(a, _)| **a)
            .map(|(_, n)| n.clone())
            .collect();
        if !opts.drop_aliased {
            return Err(Error::SingularDesign { columns: names });
        }
        log::warn!("dropping collinear design columns: {}", names.join(", "));
    }
    let active: Vec<usize> = (0..p).filter(|&j| !aliased[j]).collect();
    if active.is_empty() {
        return Err(Error::SingularDesign {
            columns: column_names.to_vec(),
        });
    }
    let xa = select_columns(x, &active);
    let k = active.len();

    let mut beta = DVector::zeros(k);
    let mut eta = DVector::zeros(x.nrows());
    let mut dev = deviance(&eta, y, w);
    let mut converged = false;
    let mut iterations = 0;
    let mut ww = vec![0.0; y.len()];
    let mut z = vec![0.0; y.len()];

    for iter in 1..=opts.max_iter {
        iterations = iter;
        for i in 0..y.len() {
            let pi = clamp_prob(logistic(eta[i]));
            let v = pi * (1.0 - pi);
            ww[i] = w[i] * v;
            z[i] = eta[i] + (y[i] - pi) / v;
        }
        let gram = weighted_gram(&xa, &ww);
        let wz: Vec<f64> = ww.iter().zip(&z).map(|(a, b)| a * b).collect();
        let rhs = xa.tr_mul(&DVector::from_vec(wz));
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("X'WX is not positive definite".into()))?;
        let mut beta_new = chol.solve(&rhs);
        let mut eta_new = &xa * &beta_new;
        let mut dev_new = deviance(&eta_new, y, w);

        let mut halvings = 0;
        while !(dev_new <= dev + 1e-12 * dev.abs()) && halvings < MAX_HALVINGS {
            beta_new = (&beta_new + &beta) * 0.5;
            eta_new = &xa * &beta_new;
            dev_new = deviance(&eta_new, y, w);
            halvings += 1;
        }
        if !(dev_new <= dev + 1e-12 * dev.abs()) {
            log::warn!("IRLS step-halving failed to reduce the deviance at iteration {iter}");
            break;
        }
        let change = (dev_new - dev).abs() / (dev_new.abs() + 0.1);
        beta = beta_new;
        eta = eta_new;
        dev = dev_new;
        if change < opts.tol || score_norm(&xa, &eta, y, w) < 1e-10 {
            converged = true;
            break;
        }
    }

    let mut separated = false;
    for i in 0..y.len() {
        let pi = logistic(eta[i]);
        if w[i] > 0.0 && (pi <= PROB_CLAMP || pi >= 1.0 - PROB_CLAMP) {
            separated = true;
        }
        let pc = clamp_prob(pi);
        ww[i] = w[i] * pc * (1.0 - pc);
    }
    if !converged {
        log::warn!("logistic regression did not converge after {iterations} iterations");
    }
    if separated {
        log::warn!("fitted probabilities numerically 0 or 1 occurred (separation)");
    }
    let cov = invert_spd(&weighted_gram(&xa, &ww), "X'WX")?;

    let mut coefficients = DVector::zeros(p);
    for (a, &j) in active.iter().enumerate() {
        coefficients[j] = beta[a];
    }
    Ok(GlmFit {
        coefficients,
        model_covariance: embed(&active, p, &cov),
        deviance: dev,
        converged,
        separated,
        iterations,
        column_names: column_names.to_vec(),
        aliased,
        n_obs: w.iter().filter(|&&v| v > 0.0).count(),
    })
}

fn score_norm(x: &DMatrix<f64>, eta: &DVector<f64>, y: &[f64], w: &[f64]) -> f64 {
    let r: Vec<f64> = (0..y.len()).map(|i| w[i] * (y[i] - logistic(eta[i]))).collect();
    x.tr_mul(&DVector::from_vec(r)).amax()
}

/// Weighted score `sum_i w_i (y_i - p_i) x_i` at the fitted coefficients.
pub fn score(fit: &GlmFit, x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> DVector<f64> {
    let eta = fit.linear_predictor(x);
    let r: Vec<f64> = (0..y.len()).map(|i| w[i] * (y[i] - logistic(eta[i]))).collect();
    x.tr_mul(&DVector::from_vec(r))
}

/// Logistic of `x β` for a design whose columns match the fit.
pub fn predict_probability(fit: &GlmFit, x: &DMatrix<f64>, column_names: &[String]) -> Result<Vec<f64>> {
    if column_names != fit.column_names.as_slice() || x.ncols() != fit.coefficients.len() {
        return Err(Error::Schema(format!(
            "design columns [{}] do not match fitted columns [{}]",
            column_names.join(", "),
            fit.column_names.join(", ")
        )));
    }
    Ok(fit.linear_predictor(x).iter().map(|&e| logistic(e)).collect())
}

/// Bread-meat-bread covariance with per-cluster score sums, weights held fixed.
pub fn cluster_sandwich_covariance(
    fit: &GlmFit,
    x: &DMatrix<f64>,
    y: &[f64],
    w: &[f64],
    cluster_ids: &[i64],
) -> Result<SandwichCovariance> {
    check_inputs(x, y, w)?;
    if cluster_ids.len() != x.nrows() {
        return Err(Error::Parameter(format!(
            "{} cluster ids for {} rows",
            cluster_ids.len(),
            x.nrows()
        )));
    }
    let active = fit.active_columns();
    let xa = select_columns(x, &active);
    let k = active.len();
    let eta = fit.linear_predictor(x);

    let mut hess_w = vec![0.0; y.len()];
    let mut slot: HashMap<i64, usize> = HashMap::new();
    let mut scores: Vec<DVector<f64>> = Vec::new();
    for i in 0..y.len() {
        let p = clamp_prob(logistic(eta[i]));
        hess_w[i] = w[i] * p * (1.0 - p);
        let r = w[i] * (y[i] - p);
        let s = *slot.entry(cluster_ids[i]).or_insert_with(|| {
            scores.push(DVector::zeros(k));
            scores.len() - 1
        });
        if r != 0.0 {
            scores[s].axpy(r, &xa.row(i).transpose(), 1.0);
        }
    }
    let bread = invert_spd(&weighted_gram(&xa, &hess_w), "sandwich bread")?;
    let mut meat = DMatrix::zeros(k, k);
    for u in &scores {
        meat.ger(1.0, u, u, 1.0);
    }
    let v = &bread * meat * &bread;
    let v = (&v + v.transpose()) * 0.5;
    Ok(SandwichCovariance {
        matrix: embed(&active, fit.coefficients.len(), &v),
        cluster_count: scores.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    /// `None` for aliased columns.
    pub estimate: Option<f64>,
    pub std_error: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

/// Two-sided normal p-value for a Wald statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Wald summary row from an estimate and its standard error.
pub fn wald_row(name: &str, estimate: f64, se: f64) -> CoefficientRow {
    let z = estimate / se;
    CoefficientRow {
        name: name.to_string(),
        estimate: Some(estimate),
        std_error: Some(se),
        lower: Some(estimate - Z_975 * se),
        upper: Some(estimate + Z_975 * se),
        z: Some(z),
        p_value: Some(normal_two_sided_p(z)),
    }
}

/// Coefficient table using standard errors from `covariance`.
pub fn coefficient_table(fit: &GlmFit, covariance: &DMatrix<f64>) -> Vec<CoefficientRow> {
    fit.column_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            if fit.aliased[j] {
                CoefficientRow {
                    name: name.clone(),
                    estimate: None,
                    std_error: None,
                    lower: None,
                    upper: None,
                    z: None,
                    p_value: None,
                }
            } else {
                wald_row(name, fit.coefficients[j], covariance[(j, j)].max(0.0).sqrt())
            }
        })
        .collect()
}
