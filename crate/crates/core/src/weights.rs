//! Inverse probability of censoring and treatment-switch weights.
//!
//! Weight models are logistic regressions fit once on the original
//! person-period records. Their fitted probabilities become per-period ratios
//! `r_C(t)` and `r_A(t)`, and each expanded row `(m, k)` receives
//! `prod_{t=m}^{m+k-1} r_C(t) * prod_{t=m+1}^{m+k} r_A(t)`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateKind, LongitudinalDataset, LongitudinalRecord};
use crate::design::{quantile_sorted, DesignSpec, Frame, ModelFormula};
use crate::error::{Error, Result};
use crate::expansion::{
    derive_time_on_regime, EstimandType, ExpandedDataset, ExpandedRow, ExpandedSchema, RowSink, TrialManifest,
    TIME_ON_REGIME,
};
use crate::glm::{
    coefficient_table, fit_weighted_logistic, predict_probability, CoefficientRow, FitOptions, GlmFit, PROB_CLAMP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolCense {
    #[default]
    None,
    Both,
    Numerator,
}

impl PoolCense {
    fn pools_denominator(self) -> bool {
        self == PoolCense::Both
    }

    fn pools_numerator(self) -> bool {
        self != PoolCense::None
    }
}

impl FromStr for PoolCense {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PoolCense::None),
            "both" => Ok(PoolCense::Both),
            "numerator" => Ok(PoolCense::Numerator),
            other => Err(Error::Parameter(format!("unknown pool_cense `{other}`"))),
        }
    }
}

impl fmt::Display for PoolCense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolCense::None => "none",
            PoolCense::Both => "both",
            PoolCense::Numerator => "numerator",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    Asis,
    /// Clamp to the 1st and 99th percentiles of all weights.
    P99,
    Limits {
        lo: f64,
        hi: f64,
    },
    Unweighted,
}

impl Truncation {
    pub fn validate(&self) -> Result<()> {
        if let Truncation::Limits { lo, hi } = *self {
            if !(lo >= 0.0 && lo < hi) {
                return Err(Error::Parameter(format!(
                    "truncation limits need 0 <= lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

impl FromStr for Truncation {
    type Err = Error;
    /// `asis`, `p99`, `unweighted` or `limits:LO,HI`.
    fn from_str(s: &str) -> Result<Self> {
        let t = match s {
            "asis" => Truncation::Asis,
            "p99" => Truncation::P99,
            "unweighted" => Truncation::Unweighted,
            _ => {
                let bad = || Error::Parameter(format!("unknown truncation `{s}`"));
                let rest = s.strip_prefix("limits:").ok_or_else(bad)?;
                let (lo, hi) = rest.split_once(',').ok_or_else(bad)?;
                Truncation::Limits {
                    lo: lo.trim().parse().map_err(|_| bad())?,
                    hi: hi.trim().parse().map_err(|_| bad())?,
                }
            }
        };
        t.validate()?;
        Ok(t)
    }
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncation::Asis => f.write_str("asis"),
            Truncation::P99 => f.write_str("p99"),
            Truncation::Limits { lo, hi } => write!(f, "limits:{lo},{hi}"),
            Truncation::Unweighted => f.write_str("unweighted"),
        }
    }
}

/// Weight model formulas are right-hand sides such as `"X1 + X2 + age_s"`.
/// The variable `time_on_regime` refers to the value at the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightSpec {
    pub use_censor_weights: bool,
    pub cense_d_cov: String,
    pub cense_n_cov: String,
    pub switch_d_cov: String,
    pub switch_n_cov: String,
    pub pool_cense: PoolCense,
    /// When false, numerator probabilities are taken as 1.
    pub stabilized: bool,
    pub eligible_wts_0: Option<String>,
    pub eligible_wts_1: Option<String>,
    pub truncation: Truncation,
    pub fit: FitOptions,
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec {
            use_censor_weights: true,
            cense_d_cov: "1".into(),
            cense_n_cov: "1".into(),
            switch_d_cov: "1".into(),
            switch_n_cov: "1".into(),
            pool_cense: PoolCense::None,
            stabilized: true,
            eligible_wts_0: None,
            eligible_wts_1: None,
            truncation: Truncation::Asis,
            fit: FitOptions::default(),
        }
    }
}

impl WeightSpec {
    pub fn validate(&self, estimand: EstimandType) -> Result<()> {
        if estimand == EstimandType::Itt && self.use_censor_weights && self.pool_cense == PoolCense::None {
            return Err(Error::Parameter(
                "the ITT estimand requires pool_cense = both or numerator".into(),
            ));
        }
        self.truncation.validate()?;
        for f in [
            &self.cense_d_cov,
            &self.cense_n_cov,
            &self.switch_d_cov,
            &self.switch_n_cov,
        ] {
            ModelFormula::parse(f)?;
        }
        Ok(())
    }

    fn formula(src: &str) -> Result<ModelFormula> {
        ModelFormula::parse(src)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModel {
    pub label: String,
    /// Treatment value defining the stratum; `None` when pooled.
    pub stratum: Option<u8>,
    pub design: DesignSpec,
    pub fit: GlmFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightModelSummary {
    pub label: String,
    pub formula: String,
    pub converged: bool,
    pub separated: bool,
    pub n_obs: usize,
    pub coefficients: Vec<CoefficientRow>,
}

impl WeightModel {
    fn predict(&self, frame: &Frame) -> Result<Vec<f64>> {
        let x = self.design.build(frame)?;
        predict_probability(&self.fit, &x, &self.design.column_names)
    }

    pub fn summary(&self) -> WeightModelSummary {
        WeightModelSummary {
            label: self.label.clone(),
            formula: self.design.formula.to_string(),
            converged: self.fit.converged,
            separated: self.fit.separated,
            n_obs: self.fit.n_obs,
            coefficients: coefficient_table(&self.fit, &self.fit.model_covariance),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightModelSet {
    pub censor_den: Vec<WeightModel>,
    pub censor_num: Vec<WeightModel>,
    pub switch_den: Vec<WeightModel>,
    pub switch_num: Vec<WeightModel>,
}

impl WeightModelSet {
    pub fn all(&self) -> impl Iterator<Item = &WeightModel> {
        self.censor_den
            .iter()
            .chain(&self.censor_num)
            .chain(&self.switch_den)
            .chain(&self.switch_num)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.all().map(|m| m.label.as_str()).collect()
    }

    pub fn get(&self, label: &str) -> Option<&WeightModel> {
        self.all().find(|m| m.label == label)
    }

    pub fn summaries(&self) -> Vec<WeightModelSummary> {
        self.all().map(WeightModel::summary).collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &self.summaries())?;
        Ok(())
    }
}

/// Per-individual bookkeeping over the original records.
struct Layout<'a> {
    ds: &'a LongitudinalDataset,
    /// Index of the first eligible record of each record's individual.
    first_eligible: Vec<Option<usize>>,
    /// Record has a previous record of the same individual.
    has_prev: Vec<bool>,
    /// Record lies on some per-protocol follow-up path: an eligible baseline
    /// at or before it with unchanged treatment since.
    adherent: Vec<bool>,
}

impl<'a> Layout<'a> {
    fn new(ds: &'a LongitudinalDataset) -> Self {
        let n = ds.len();
        let recs = ds.records();
        let mut first_eligible = vec![None; n];
        let mut has_prev = vec![false; n];
        let mut adherent = vec![false; n];
        for g in ds.group_ranges() {
            let first = g.clone().find(|&i| recs[i].eligible == 1);
            let mut open = false;
            for i in g.clone() {
                first_eligible[i] = first;
                has_prev[i] = i > g.start;
                if has_prev[i] && recs[i].treatment != recs[i - 1].treatment {
                    open = false;
                }
                if recs[i].eligible == 1 {
                    open = true;
                }
                adherent[i] = open;
            }
        }
        Layout {
            ds,
            first_eligible,
            has_prev,
            adherent,
        }
    }

    fn started(&self, i: usize) -> bool {
        self.first_eligible[i].is_some_and(|f| i >= f)
    }

    fn censor_row(&self, i: usize, estimand: EstimandType) -> bool {
        let r = &self.ds.records()[i];
        self.started(i) && r.outcome == 0 && (estimand != EstimandType::Pp || self.adherent[i])
    }

    /// Rows entering the switch models: a previous record inside the follow-up.
    fn switch_row(&self, i: usize, estimand: EstimandType) -> bool {
        self.has_prev[i] && self.started(i - 1) && (estimand != EstimandType::Pp || self.adherent[i - 1])
    }

    fn lagged_time_on_regime(&self, i: usize) -> f64 {
        if self.has_prev[i] {
            self.ds.records()[i - 1].time_on_regime.unwrap_or(0) as f64
        } else {
            0.0
        }
    }

    /// Frame over the records `idx`, holding covariates, the period and
    /// treatment columns, and the lagged `time_on_regime`.
    fn frame(&self, idx: &[usize]) -> Result<Frame> {
        let recs = self.ds.records();
        let map = self.ds.column_map();
        let mut frame = Frame::new(idx.len());
        for (j, c) in map.covariates.iter().enumerate() {
            frame.set(c.name.clone(), idx.iter().map(|&i| recs[i].covariates[j]).collect())?;
            if c.kind == CovariateKind::Categorical {
                frame.mark_categorical(c.name.clone());
            }
        }
        frame.set(map.period.clone(), idx.iter().map(|&i| recs[i].period as f64).collect())?;
        frame.set(
            map.treatment.clone(),
            idx.iter().map(|&i| recs[i].treatment as f64).collect(),
        )?;
        frame.set(
            TIME_ON_REGIME,
            idx.iter().map(|&i| self.lagged_time_on_regime(i)).collect(),
        )?;
        Ok(frame)
    }

    fn covariate_value(&self, i: usize, name: &str) -> Result<f64> {
        let j = self
            .ds
            .covariate_index(name)
            .ok_or_else(|| Error::Schema(format!("unknown eligibility column `{name}`")))?;
        Ok(self.ds.records()[i].covariates[j])
    }
}

struct Job {
    label: String,
    stratum: Option<u8>,
    formula: ModelFormula,
    rows: Vec<usize>,
    response: fn(&LongitudinalRecord) -> f64,
}

fn uncensored(r: &LongitudinalRecord) -> f64 {
    1.0 - r.censored as f64
}

fn treated(r: &LongitudinalRecord) -> f64 {
    r.treatment as f64
}

fn run_jobs(layout: &Layout, jobs: Vec<Job>, opts: &FitOptions) -> Result<Vec<WeightModel>> {
    jobs.into_par_iter()
        .map(|job| {
            if job.rows.is_empty() {
                return Err(Error::EmptyStratum(format!(
                    "no fitting rows for weight model {}",
                    job.label
                )));
            }
            let frame = layout.frame(&job.rows)?;
            let design = DesignSpec::train(&job.formula, &frame)?;
            let x = design.build(&frame)?;
            let recs = layout.ds.records();
            let y: Vec<f64> = job.rows.iter().map(|&i| (job.response)(&recs[i])).collect();
            let w = vec![1.0; y.len()];
            let fit = fit_weighted_logistic(&x, &y, &w, &design.column_names, opts).map_err(|e| match e {
                Error::SingularDesign { columns } => Error::SingularDesign {
                    columns: columns.into_iter().map(|c| format!("{}:{c}", job.label)).collect(),
                },
                other => other,
            })?;
            if !fit.converged {
                log::warn!(
                    "weight model {} did not converge in {} iterations",
                    job.label,
                    fit.iterations
                );
            }
            if fit.separated {
                log::warn!(
                    "weight model {} has fitted probabilities at the boundary (separation)",
                    job.label
                );
            }
            Ok(WeightModel {
                label: job.label,
                stratum: job.stratum,
                design,
                fit,
            })
        })
        .collect()
}

/// Reuses already fitted models when a numerator is the same model as the denominator.
fn relabel(models: &[WeightModel], from: &str, to: &str) -> Vec<WeightModel> {
    models
        .iter()
        .map(|m| WeightModel {
            label: m.label.replacen(from, to, 1),
            ..m.clone()
        })
        .collect()
}

fn with_time_on_regime(ds: &LongitudinalDataset) -> std::borrow::Cow<'_, LongitudinalDataset> {
    if ds.records().iter().all(|r| r.time_on_regime.is_some()) {
        std::borrow::Cow::Borrowed(ds)
    } else {
        std::borrow::Cow::Owned(derive_time_on_regime(ds))
    }
}

/// Fits the censoring denominator and numerator models. Strata are defined
/// by the treatment received in the same period.
pub fn fit_censoring_models(
    ds: &LongitudinalDataset,
    spec: &WeightSpec,
    estimand: EstimandType,
) -> Result<(Vec<WeightModel>, Vec<WeightModel>)> {
    if ds.column_map().censored.is_none() {
        return Err(Error::Schema("censoring weights need a censored column".into()));
    }
    let ds = with_time_on_regime(ds);
    let layout = Layout::new(&ds);
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| layout.censor_row(i, estimand)).collect();
    let recs = ds.records();
    let by_arm = |a: u8| -> Vec<usize> { rows.iter().copied().filter(|&i| recs[i].treatment == a).collect() };

    let jobs_for = |src: &str, pooled: bool, tag: &str| -> Result<Vec<Job>> {
        let formula = WeightSpec::formula(src)?;
        Ok(if pooled {
            vec![Job {
                label: format!("cens_pool_{tag}"),
                stratum: None,
                formula,
                rows: rows.clone(),
                response: uncensored,
            }]
        } else {
            (0..=1u8)
                .map(|a| Job {
                    label: format!("cens_{tag}{a}"),
                    stratum: Some(a),
                    formula: formula.clone(),
                    rows: by_arm(a),
                    response: uncensored,
                })
                .collect()
        })
    };

    let den = run_jobs(
        &layout,
        jobs_for(&spec.cense_d_cov, spec.pool_cense.pools_denominator(), "d")?,
        &spec.fit,
    )?;
    if !spec.stabilized {
        return Ok((den, Vec::new()));
    }
    let same_strata = spec.pool_cense.pools_denominator() == spec.pool_cense.pools_numerator();
    let num = if same_strata && WeightSpec::formula(&spec.cense_n_cov)? == WeightSpec::formula(&spec.cense_d_cov)? {
        relabel(&den, "_d", "_n")
    } else {
        run_jobs(
            &layout,
            jobs_for(&spec.cense_n_cov, spec.pool_cense.pools_numerator(), "n")?,
            &spec.fit,
        )?
    };
    Ok((den, num))
}

fn wts_excluded(layout: &Layout, spec: &WeightSpec, i: usize, stratum: u8) -> Result<bool> {
    let col = if stratum == 0 {
        &spec.eligible_wts_0
    } else {
        &spec.eligible_wts_1
    };
    match col {
        Some(name) => Ok(layout.covariate_value(i, name)? == 0.0),
        None => Ok(false),
    }
}

/// Fits the treatment-switch models, stratified by the previous treatment.
pub fn fit_switch_models(
    ds: &LongitudinalDataset,
    spec: &WeightSpec,
    estimand: EstimandType,
) -> Result<(Vec<WeightModel>, Vec<WeightModel>)> {
    let ds = with_time_on_regime(ds);
    let layout = Layout::new(&ds);
    let recs = ds.records();
    let mut strata: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for i in 0..ds.len() {
        if layout.switch_row(i, estimand) {
            let a = recs[i - 1].treatment;
            if !wts_excluded(&layout, spec, i, a)? {
                strata[a as usize].push(i);
            }
        }
    }
    let jobs_for = |src: &str, tag: &str| -> Result<Vec<Job>> {
        let formula = WeightSpec::formula(src)?;
        Ok((0..=1u8)
            .map(|a| Job {
                label: format!("switch_{tag}{a}"),
                stratum: Some(a),
                formula: formula.clone(),
                rows: strata[a as usize].clone(),
                response: treated,
            })
            .collect())
    };
    let den = run_jobs(&layout, jobs_for(&spec.switch_d_cov, "d")?, &spec.fit)?;
    if !spec.stabilized {
        return Ok((den, Vec::new()));
    }
    let num = if WeightSpec::formula(&spec.switch_n_cov)? == WeightSpec::formula(&spec.switch_d_cov)? {
        relabel(&den, "_d", "_n")
    } else {
        run_jobs(&layout, jobs_for(&spec.switch_n_cov, "n")?, &spec.fit)?
    };
    Ok((den, num))
}

/// Fits every weight model the estimand and spec call for.
pub fn fit_weight_models(
    ds: &LongitudinalDataset,
    spec: &WeightSpec,
    estimand: EstimandType,
) -> Result<WeightModelSet> {
    spec.validate(estimand)?;
    let ds = with_time_on_regime(ds);
    let mut set = WeightModelSet::default();
    if spec.use_censor_weights {
        let (d, n) = fit_censoring_models(&ds, spec, estimand)?;
        set.censor_den = d;
        set.censor_num = n;
    }
    if estimand.uses_switch_weights() {
        let (d, n) = fit_switch_models(&ds, spec, estimand)?;
        set.switch_den = d;
        set.switch_num = n;
    }
    Ok(set)
}

/// Per-record censoring and switch ratios, 1 where no model applies.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRatios {
    index: HashMap<i64, (usize, usize)>,
    periods: Vec<i64>,
    pub r_c: Vec<f64>,
    pub r_a: Vec<f64>,
}

impl PeriodRatios {
    /// All ratios 1 for the records of `ds`.
    pub fn ones(ds: &LongitudinalDataset) -> Self {
        let mut index = HashMap::new();
        for g in ds.group_ranges() {
            index.insert(ds.records()[g.start].id, (g.start, g.end));
        }
        PeriodRatios {
            index,
            periods: ds.records().iter().map(|r| r.period).collect(),
            r_c: vec![1.0; ds.len()],
            r_a: vec![1.0; ds.len()],
        }
    }

    /// Position of record `(id, period)`.
    pub fn locate(&self, id: i64, period: i64) -> Option<usize> {
        let &(a, b) = self.index.get(&id)?;
        self.periods[a..b].binary_search(&period).ok().map(|p| a + p)
    }

    fn range_of(&self, id: i64) -> Option<(usize, usize)> {
        self.index.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.periods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.periods.is_empty()
    }
}

fn stratum_model(models: &[WeightModel], a: u8) -> &WeightModel {
    models
        .iter()
        .find(|m| m.stratum.is_none() || m.stratum == Some(a))
        .expect("models cover every stratum")
}

/// Predicts `P(y = 1)` for each record in `idx` from the model for its stratum.
fn predict_by_stratum(
    layout: &Layout,
    models: &[WeightModel],
    idx: &[usize],
    stratum_of: impl Fn(usize) -> u8,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; idx.len()];
    for a in 0..=1u8 {
        let pos: Vec<usize> = (0..idx.len()).filter(|&p| stratum_of(idx[p]) == a).collect();
        if pos.is_empty() {
            continue;
        }
        let rows: Vec<usize> = pos.iter().map(|&p| idx[p]).collect();
        let frame = layout.frame(&rows)?;
        let probs = stratum_model(models, a).predict(&frame)?;
        for (p, v) in pos.into_iter().zip(probs) {
            out[p] = v;
        }
    }
    Ok(out)
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn warn_boundary(label: &str, probs: &[f64]) {
    let n = probs
        .iter()
        .filter(|&&p| p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP)
        .count();
    if n > 0 {
        log::warn!("{n} {label} denominator probabilities at the clamp boundary");
    }
}

/// Converts fitted models into per-record ratios.
pub fn compute_period_ratios(
    ds: &LongitudinalDataset,
    models: &WeightModelSet,
    spec: &WeightSpec,
    estimand: EstimandType,
) -> Result<PeriodRatios> {
    let ds = with_time_on_regime(ds);
    let layout = Layout::new(&ds);
    let recs = ds.records();
    let mut ratios = PeriodRatios::ones(&ds);

    if spec.use_censor_weights && !models.censor_den.is_empty() {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| layout.started(i) && recs[i].outcome == 0)
            .collect();
        let arm = |i: usize| recs[i].treatment;
        let den = predict_by_stratum(&layout, &models.censor_den, &idx, arm)?;
        warn_boundary("censoring", &den);
        let num = if models.censor_num.is_empty() {
            vec![1.0; idx.len()]
        } else {
            predict_by_stratum(&layout, &models.censor_num, &idx, arm)?
        };
        for (p, &i) in idx.iter().enumerate() {
            let n = if models.censor_num.is_empty() {
                1.0
            } else {
                clamp(num[p])
            };
            ratios.r_c[i] = n / clamp(den[p]);
        }
    }

    if estimand.uses_switch_weights() && !models.switch_den.is_empty() {
        let mut idx = Vec::new();
        for i in 0..ds.len() {
            if layout.has_prev[i] && layout.started(i - 1) && !wts_excluded(&layout, spec, i, recs[i - 1].treatment)? {
                idx.push(i);
            }
        }
        let prev = |i: usize| recs[i - 1].treatment;
        let den = predict_by_stratum(&layout, &models.switch_den, &idx, prev)?;
        warn_boundary("switch", &den);
        let num = if models.switch_num.is_empty() {
            None
        } else {
            Some(predict_by_stratum(&layout, &models.switch_num, &idx, prev)?)
        };
        for (p, &i) in idx.iter().enumerate() {
            let d = clamp(den[p]);
            let n = num.as_ref().map_or(1.0, |v| clamp(v[p]));
            ratios.r_a[i] = if recs[i].treatment == 1 {
                if num.is_some() {
                    n / d
                } else {
                    1.0 / d
                }
            } else if num.is_some() {
                (1.0 - n) / (1.0 - d)
            } else {
                1.0 / (1.0 - d)
            };
        }
    }
    Ok(ratios)
}

/// Writes cumulative weights into `rows`. Rows of the same trial that arrive
/// in follow-up order are updated incrementally.
pub fn attach_weights_rows(rows: &mut [ExpandedRow], ratios: &PeriodRatios, estimand: EstimandType) -> Result<()> {
    let switch = estimand.uses_switch_weights();
    // (id, trial, record index, weight) of the previous row.
    let mut cache: Option<(i64, i64, usize, f64)> = None;
    for row in rows.iter_mut() {
        let missing = || Error::Integrity(format!("no weight ratio for id {} period {}", row.id, row.period()));
        let end = ratios.locate(row.id, row.period()).ok_or_else(missing)?;
        let (start, mut w) = match cache {
            Some((id, m, i, w)) if id == row.id && m == row.trial_period && i <= end => (i, w),
            _ => {
                let base = ratios.locate(row.id, row.trial_period).ok_or_else(|| {
                    Error::Integrity(format!("no weight ratio for id {} period {}", row.id, row.trial_period))
                })?;
                if base > end || ratios.range_of(row.id).is_none() {
                    return Err(missing());
                }
                (base, 1.0)
            }
        };
        for i in start + 1..=end {
            w *= ratios.r_c[i - 1];
            if switch {
                w *= ratios.r_a[i];
            }
        }
        row.weight = w;
        cache = Some((row.id, row.trial_period, end, w));
    }
    Ok(())
}

/// Attaches cumulative weights to every expanded row.
pub fn attach_weights(mut data: ExpandedDataset, ratios: &PeriodRatios) -> Result<ExpandedDataset> {
    attach_weights_rows(&mut data.rows, ratios, data.estimand)?;
    Ok(data)
}

/// Applies a truncation policy to a vector of weights.
pub fn truncate_values(weights: &mut [f64], policy: Truncation) {
    match policy {
        Truncation::Asis => {}
        Truncation::Unweighted => weights.iter_mut().for_each(|w| *w = 1.0),
        Truncation::Limits { lo, hi } => weights.iter_mut().for_each(|w| *w = w.clamp(lo, hi)),
        Truncation::P99 => {
            if weights.is_empty() {
                return;
            }
            let mut sorted = weights.to_vec();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let lo = quantile_sorted(&sorted, 0.01);
            let hi = quantile_sorted(&sorted, 0.99);
            weights.iter_mut().for_each(|w| *w = w.clamp(lo, hi));
        }
    }
}

pub fn truncate_weights(mut data: ExpandedDataset, policy: Truncation) -> ExpandedDataset {
    let mut w: Vec<f64> = data.rows.iter().map(|r| r.weight).collect();
    truncate_values(&mut w, policy);
    for (r, v) in data.rows.iter_mut().zip(w) {
        r.weight = v;
    }
    data
}

/// Attaches weights to each chunk before passing it on.
pub struct WeightingSink<'a, S: RowSink> {
    pub inner: S,
    pub ratios: &'a PeriodRatios,
    pub estimand: EstimandType,
}

impl<S: RowSink> RowSink for WeightingSink<'_, S> {
    fn write_chunk(&mut self, rows: &mut Vec<ExpandedRow>, schema: &ExpandedSchema) -> Result<()> {
        attach_weights_rows(rows, self.ratios, self.estimand)?;
        self.inner.write_chunk(rows, schema)
    }

    fn finish(&mut self) -> Result<TrialManifest> {
        self.inner.finish()
    }
}
