//! Marginal cumulative incidence under sustained treatment and non-treatment,
//! with percentile intervals from coefficient draws.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{parse_float, CovariateKind};
use crate::design::{quantile_sorted, Frame};
use crate::error::{Error, Result};
use crate::expansion::{EstimandType, ExpandedDataset, ExpandedRow};
use crate::glm::logistic;
use crate::msm::{active_robust, expanded_frame, MsmFit};

/// Variables set by prediction itself rather than read from new data.
const SET_BY_PREDICTION: [&str; 4] = ["followup_time", "assigned_treatment", "treatment", "dose"];

/// Baseline rows for which marginal curves are averaged.
#[derive(Debug, Clone)]
pub struct NewData {
    frame: Frame,
}

impl NewData {
    pub fn from_frame(frame: Frame) -> Self {
        NewData { frame }
    }

    /// Baseline rows (`followup_time == 0`) of the expanded data that pass `keep`.
    pub fn from_expanded(data: &ExpandedDataset, keep: impl Fn(&ExpandedRow) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..data.rows.len())
            .filter(|&i| data.rows[i].followup_time == 0 && keep(&data.rows[i]))
            .collect();
        Ok(NewData {
            frame: expanded_frame(data, &idx)?,
        })
    }

    /// Reads every column as numeric. When a `followup_time` column exists only
    /// its zero rows are kept.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(std::io::BufReader::new(file));
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            for (j, name) in headers.iter().enumerate() {
                cols[j].push(parse_float(rec.get(j).unwrap_or(""), name, i + 1)?);
            }
        }
        let n = cols.first().map_or(0, Vec::len);
        let keep: Vec<bool> = match headers.iter().position(|h| h == "followup_time") {
            Some(j) => cols[j].iter().map(|&v| v == 0.0).collect(),
            None => vec![true; n],
        };
        let mut frame = Frame::new(n);
        for (name, col) in headers.into_iter().zip(cols) {
            frame.set(name, col)?;
        }
        Ok(NewData {
            frame: frame.filter(&keep),
        })
    }

    pub fn len(&self) -> usize {
        self.frame.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frame.nrows() == 0
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    /// Checks that every variable the model needs is present.
    pub fn check(&self, fit: &MsmFit) -> Result<()> {
        for v in fit.design.formula.variables() {
            if !SET_BY_PREDICTION.contains(&v.as_str()) && self.frame.get(&v).is_none() {
                return Err(Error::Schema(format!("new data lacks variable `{v}`")));
            }
        }
        Ok(())
    }

    /// Rows `r` of the new data repeated for follow-up times `0..=max_time`
    /// under treatment strategy `assigned`, ordered row-major by `(r, k)`.
    fn design(&self, fit: &MsmFit, rows: &[usize], assigned: u8, max_time: i64) -> Result<DMatrix<f64>> {
        self.check(fit)?;
        let times = (max_time + 1) as usize;
        let n = rows.len() * times;
        let mut frame = Frame::new(n);
        for name in self.frame.names() {
            if SET_BY_PREDICTION.contains(&name.as_str()) {
                continue;
            }
            let src = self.frame.get(name).expect("listed column");
            frame.set(
                name.clone(),
                rows.iter().flat_map(|&r| std::iter::repeat_n(src[r], times)).collect(),
            )?;
        }
        for (name, kind) in &fit.covariate_kinds {
            if *kind == CovariateKind::Categorical {
                frame.mark_categorical(name.clone());
            }
        }
        let a = assigned as f64;
        let ks = || rows.iter().flat_map(|_| 0..times).map(|k| k as f64);
        frame.set("followup_time", ks().collect())?;
        frame.set("assigned_treatment", vec![a; n])?;
        frame.set("treatment", vec![a; n])?;
        frame.set("dose", ks().map(|k| a * (k + 1.0)).collect())?;
        fit.design.build(&frame)
    }
}

/// Cumulative incidence `sum_j h(j) prod_{l<j} (1 - h(l))` for each prefix of `hazards`.
pub fn cumulative_incidence(hazards: &[f64]) -> Vec<f64> {
    let mut surv = 1.0;
    let mut ci = 0.0;
    hazards
        .iter()
        .map(|&h| {
            ci += h * surv;
            surv *= 1.0 - h;
            ci
        })
        .collect()
}

/// Conditional cumulative incidence for one new-data row at follow-up times `0..=max_time`.
pub fn conditional_cum_inc(
    fit: &MsmFit,
    newdata: &NewData,
    row: usize,
    assigned: u8,
    max_time: i64,
) -> Result<Vec<f64>> {
    if row >= newdata.len() {
        return Err(Error::Parameter(format!("new data has no row {row}")));
    }
    let x = newdata.design(fit, &[row], assigned, max_time)?;
    let hazards: Vec<f64> = (x * &fit.glm.coefficients).iter().map(|&e| logistic(e)).collect();
    Ok(cumulative_incidence(&hazards))
}

/// Mean over rows of the conditional cumulative incidence, for coefficients `beta`.
fn marginal_curve(x: &DMatrix<f64>, beta: &DVector<f64>, times: usize) -> Vec<f64> {
    let eta = x * beta;
    let rows = eta.len() / times;
    let mut total = vec![0.0; times];
    let mut hazards = vec![0.0; times];
    for r in 0..rows {
        for k in 0..times {
            hazards[k] = logistic(eta[r * times + k]);
        }
        for (t, v) in total.iter_mut().zip(cumulative_incidence(&hazards)) {
            *t += v;
        }
    }
    total.iter().map(|t| t / rows as f64).collect()
}

/// `samples` draws from the normal distribution centred on the coefficients
/// with the robust covariance. Aliased coefficients stay at 0.
pub fn sample_coefficients(fit: &MsmFit, samples: usize, seed: u64) -> Vec<DVector<f64>> {
    let active = fit.glm.active_columns();
    let sigma = active_robust(fit);
    let factor = symmetric_factor(&sigma);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let z = DVector::from_fn(active.len(), |_, _| StandardNormal.sample(&mut rng));
            let d = &factor * z;
            let mut beta = fit.glm.coefficients.clone();
            for (i, &j) in active.iter().enumerate() {
                beta[j] += d[i];
            }
            beta
        })
        .collect()
}

/// `L` with `L L' = sigma`: Cholesky, or an eigen square root with negative
/// eigenvalues set to zero when Cholesky fails.
pub fn symmetric_factor(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = sigma.clone().cholesky() {
        return c.l();
    }
    let eig = sigma.clone().symmetric_eigen();
    let negative = eig.eigenvalues.iter().filter(|&&v| v < 0.0).count();
    if negative > 0 && eig.eigenvalues.iter().any(|&v| v < -1e-12 * sigma.amax().max(1.0)) {
        log::warn!("covariance matrix is not positive semi-definite; clamping {negative} negative eigenvalues to zero");
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionType {
    #[default]
    CumInc,
    Survival,
}

impl std::str::FromStr for PredictionType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cum_inc" => Ok(PredictionType::CumInc),
            "survival" => Ok(PredictionType::Survival),
            other => Err(Error::Parameter(format!("unknown prediction type `{other}`"))),
        }
    }
}

impl PredictionType {
    fn prefix(self) -> &'static str {
        match self {
            PredictionType::CumInc => "cum_inc",
            PredictionType::Survival => "survival",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    /// Defaults to every follow-up time up to the largest one in the fit.
    pub predict_times: Option<Vec<i64>>,
    pub samples: usize,
    pub conf_int: bool,
    #[serde(rename = "type")]
    pub kind: PredictionType,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            predict_times: None,
            samples: 100,
            conf_int: true,
            kind: PredictionType::CumInc,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub followup_time: i64,
    pub value_0: f64,
    pub value_1: f64,
    /// `value_1 - value_0`.
    pub difference: f64,
    pub lower_0: Option<f64>,
    pub upper_0: Option<f64>,
    pub lower_1: Option<f64>,
    pub upper_1: Option<f64>,
    pub difference_lower: Option<f64>,
    pub difference_upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalPrediction {
    pub kind: PredictionType,
    pub samples: usize,
    pub seed: u64,
    pub rows: Vec<PredictionRow>,
}

impl MarginalPrediction {
    pub fn header(&self) -> Vec<String> {
        let p = self.kind.prefix();
        vec![
            "followup_time".into(),
            format!("{p}_0"),
            format!("{p}_1"),
            format!("{p}_diff"),
            "diff_2.5%".into(),
            "diff_97.5%".into(),
            format!("{p}_0_2.5%"),
            format!("{p}_0_97.5%"),
            format!("{p}_1_2.5%"),
            format!("{p}_1_97.5%"),
        ]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(self.header())?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.rows {
            w.write_record([
                r.followup_time.to_string(),
                r.value_0.to_string(),
                r.value_1.to_string(),
                r.difference.to_string(),
                opt(r.difference_lower),
                opt(r.difference_upper),
                opt(r.lower_0),
                opt(r.upper_0),
                opt(r.lower_1),
                opt(r.upper_1),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn transform(curve: Vec<f64>, kind: PredictionType) -> Vec<f64> {
    match kind {
        PredictionType::CumInc => curve,
        PredictionType::Survival => curve.into_iter().map(|c| 1.0 - c).collect(),
    }
}

/// Curves under non-treatment and treatment.
type Curves = (Vec<f64>, Vec<f64>);

/// Marginal curves under both strategies, averaged over `newdata`, with
/// percentile intervals from `opts.samples` coefficient draws.
pub fn marginal_effect(fit: &MsmFit, newdata: &NewData, opts: &PredictOptions) -> Result<MarginalPrediction> {
    if fit.estimand == EstimandType::AsTreated {
        return Err(Error::Unsupported(
            "marginal prediction is only available for ITT and PP fits".into(),
        ));
    }
    if newdata.is_empty() {
        return Err(Error::EmptyData("new data has no rows".into()));
    }
    if opts.conf_int && opts.samples < 2 {
        return Err(Error::Parameter(format!(
            "confidence intervals need at least 2 samples, got {}",
            opts.samples
        )));
    }
    let times = opts
        .predict_times
        .clone()
        .unwrap_or_else(|| (0..=fit.max_followup).collect());
    if times.is_empty() || times.iter().any(|&t| t < 0) {
        return Err(Error::Parameter(
            "predict_times must be non-empty and non-negative".into(),
        ));
    }
    let max_time = *times.iter().max().expect("non-empty");
    let width = (max_time + 1) as usize;
    let rows: Vec<usize> = (0..newdata.len()).collect();
    let x0 = newdata.design(fit, &rows, 0, max_time)?;
    let x1 = newdata.design(fit, &rows, 1, max_time)?;

    let curves = |beta: &DVector<f64>| {
        let c0 = transform(marginal_curve(&x0, beta, width), opts.kind);
        let c1 = transform(marginal_curve(&x1, beta, width), opts.kind);
        (c0, c1)
    };
    let (p0, p1) = curves(&fit.glm.coefficients);

    let bounds = if opts.conf_int {
        let draws = sample_coefficients(fit, opts.samples, opts.seed);
        let sims: Vec<Curves> = draws.par_iter().map(curves).collect();
        let pct = |f: &dyn Fn(&Curves) -> f64| {
            let mut v: Vec<f64> = sims.iter().map(f).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.975))
        };
        Some(
            times
                .iter()
                .map(|&t| {
                    let k = t as usize;
                    (pct(&|s| s.0[k]), pct(&|s| s.1[k]), pct(&|s| s.1[k] - s.0[k]))
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let out = times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let k = t as usize;
            let b = bounds.as_ref().map(|b| b[i]);
            PredictionRow {
                followup_time: t,
                value_0: p0[k],
                value_1: p1[k],
                difference: p1[k] - p0[k],
                lower_0: b.map(|b| b.0 .0),
                upper_0: b.map(|b| b.0 .1),
                lower_1: b.map(|b| b.1 .0),
                upper_1: b.map(|b| b.1 .1),
                difference_lower: b.map(|b| b.2 .0),
                difference_upper: b.map(|b| b.2 .1),
            }
        })
        .collect();
    Ok(MarginalPrediction {
        kind: opts.kind,
        samples: if opts.conf_int { opts.samples } else { 0 },
        seed: opts.seed,
        rows: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_hazard_closed_form() {
        for h in [0.0, 0.1, 0.5] {
            let ci = cumulative_incidence(&[h; 10]);
            for (k, v) in ci.iter().enumerate() {
                let expect = 1.0 - (1.0 - h).powi(k as i32 + 1);
                assert!((v - expect).abs() < 1e-12);
            }
        }
        assert!((cumulative_incidence(&[0.1; 10])[9] - 0.6513215599).abs() < 1e-9);
    }

    #[test]
    fn eigen_fallback_for_indefinite() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let l = symmetric_factor(&s);
        let r = &l * l.transpose();
        // Only the positive part (eigenvalue 3 on (1,1)/sqrt2) survives.
        assert!((r[(0, 0)] - 1.5).abs() < 1e-12 && (r[(0, 1)] - 1.5).abs() < 1e-12);
        let z = symmetric_factor(&DMatrix::zeros(3, 3));
        assert_eq!(z.amax(), 0.0);
    }
}
