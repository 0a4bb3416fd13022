//! Weighted pooled logistic regression over the expanded trials, with
//! covariance clustered by individual.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::CovariateKind;
use crate::design::{parse_terms, DesignSpec, Frame, ModelFormula};
use crate::error::{Error, Result};
use crate::expansion::{EstimandType, ExpandedDataset};
use crate::glm::{
    cluster_sandwich_covariance, coefficient_table, fit_weighted_logistic, CoefficientRow, FitOptions, GlmFit,
    SandwichCovariance,
};
use crate::predicate::Predicate;
use crate::weights::{truncate_values, Truncation};

/// Term lists are formula right-hand sides, e.g. `"X1 + X2 + ns(age,3)"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsmSpec {
    /// Treatment terms: `assigned_treatment`, `dose`, or transforms of them.
    pub model_var: String,
    pub trial_terms: String,
    pub followup_terms: String,
    pub outcome_covariates: String,
    pub first_followup: Option<i64>,
    pub last_followup: Option<i64>,
    pub where_case: Option<Predicate>,
    pub analysis_weights: Truncation,
    pub use_sample_weights: bool,
    pub fit: FitOptions,
}

impl Default for MsmSpec {
    fn default() -> Self {
        MsmSpec {
            model_var: "assigned_treatment".into(),
            trial_terms: "trial_period + pow(trial_period,2)".into(),
            followup_terms: "followup_time + pow(followup_time,2)".into(),
            outcome_covariates: String::new(),
            first_followup: None,
            last_followup: None,
            where_case: None,
            analysis_weights: Truncation::Asis,
            use_sample_weights: false,
            fit: FitOptions::default(),
        }
    }
}

impl MsmSpec {
    /// The full model formula: treatment, trial, follow-up, then covariate terms.
    pub fn formula(&self) -> Result<ModelFormula> {
        let mut f = ModelFormula::new(Some("outcome".into()), parse_terms(&self.model_var)?)?;
        for part in [&self.trial_terms, &self.followup_terms, &self.outcome_covariates] {
            f.extend(&parse_terms(part)?)?;
        }
        Ok(f)
    }

    pub fn validate(&self, estimand: EstimandType) -> Result<()> {
        self.formula()?;
        self.analysis_weights.validate()?;
        if let (Some(a), Some(b)) = (self.first_followup, self.last_followup) {
            if a > b {
                return Err(Error::Parameter(format!(
                    "first_followup {a} exceeds last_followup {b}"
                )));
            }
        }
        if estimand == EstimandType::AsTreated {
            let vars: HashSet<String> = parse_terms(&self.model_var)?
                .iter()
                .flat_map(|t| t.variables().into_iter().map(str::to_string).collect::<Vec<_>>())
                .collect();
            if !vars.contains("dose") && !vars.contains("treatment") {
                return Err(Error::Parameter(
                    "the as-treated model needs dose or treatment terms in model_var".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmFit {
    pub glm: GlmFit,
    pub robust: SandwichCovariance,
    pub design: DesignSpec,
    pub spec: MsmSpec,
    pub estimand: EstimandType,
    /// Covariate names and kinds of the data the model was fit on.
    pub covariate_kinds: Vec<(String, CovariateKind)>,
    pub n_individuals: usize,
    pub n_rows: usize,
    /// Largest follow-up time among the analysis rows.
    pub max_followup: i64,
}

impl MsmFit {
    pub fn column_names(&self) -> &[String] {
        &self.design.column_names
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        let j = self.column_names().iter().position(|c| c == name)?;
        (!self.glm.aliased[j]).then(|| self.glm.coefficients[j])
    }

    pub fn robust_se(&self, name: &str) -> Option<f64> {
        let j = self.column_names().iter().position(|c| c == name)?;
        (!self.glm.aliased[j]).then(|| self.robust.matrix[(j, j)].sqrt())
    }

    /// Writes the fit plus a readable summary and the robust matrix by rows.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Out<'a> {
            formula: String,
            summary: Vec<CoefficientRow>,
            naive_summary: Vec<CoefficientRow>,
            robust_columns: &'a [String],
            robust_matrix: Vec<Vec<f64>>,
            fit: &'a MsmFit,
        }
        let m = &self.robust.matrix;
        let out = Out {
            formula: self.design.formula.to_string(),
            summary: summarize_msm(self),
            naive_summary: coefficient_table(&self.glm, &self.glm.model_covariance),
            robust_columns: self.column_names(),
            robust_matrix: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect(),
            fit: self,
        };
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &out)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            fit: MsmFit,
        }
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed: In = serde_json::from_reader(BufReader::new(file))?;
        Ok(parsed.fit)
    }
}

/// Frame of the structural columns, covariates and carried variables of `idx`.
pub fn expanded_frame(data: &ExpandedDataset, idx: &[usize]) -> Result<Frame> {
    let rows = &data.rows;
    let mut f = Frame::new(idx.len());
    let col = |g: &dyn Fn(usize) -> f64| idx.iter().map(|&i| g(i)).collect::<Vec<f64>>();
    f.set("trial_period", col(&|i| rows[i].trial_period as f64))?;
    f.set("followup_time", col(&|i| rows[i].followup_time as f64))?;
    f.set("treatment", col(&|i| rows[i].treatment as f64))?;
    if data.schema.include_assigned_treatment {
        f.set("assigned_treatment", col(&|i| rows[i].assigned_treatment as f64))?;
    }
    if data.schema.include_dose {
        f.set("dose", col(&|i| rows[i].dose as f64))?;
    }
    for (j, c) in data.schema.covariates.iter().enumerate() {
        f.set(c.name.clone(), col(&|i| rows[i].covariates[j]))?;
        if c.kind == CovariateKind::Categorical {
            f.mark_categorical(c.name.clone());
        }
    }
    for (j, name) in data.schema.where_vars.iter().enumerate() {
        f.set(name.clone(), col(&|i| rows[i].where_values[j]))?;
    }
    Ok(f)
}

/// Indices of rows inside the follow-up window that satisfy `where_case`.
pub fn select_rows(data: &ExpandedDataset, spec: &MsmSpec) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, r) in data.rows.iter().enumerate() {
        if spec.first_followup.is_some_and(|a| r.followup_time < a)
            || spec.last_followup.is_some_and(|b| r.followup_time > b)
        {
            continue;
        }
        if let Some(p) = &spec.where_case {
            if !p.eval(|name| data.value(r, name))? {
                continue;
            }
        }
        out.push(i);
    }
    Ok(out)
}

/// Fits the outcome model on the selected, weighted rows.
pub fn fit_msm(data: &ExpandedDataset, spec: &MsmSpec) -> Result<MsmFit> {
    spec.validate(data.estimand)?;
    if spec.use_sample_weights && !data.schema.has_sample_weight {
        return Err(Error::Schema(
            "use_sample_weights is set but the data has no sample_weight column".into(),
        ));
    }
    let idx = select_rows(data, spec)?;
    if idx.is_empty() {
        return Err(Error::EmptyData(
            "no expanded rows remain after the follow-up window and where_case filters".into(),
        ));
    }
    let formula = spec.formula()?;
    let frame = expanded_frame(data, &idx)?;
    let design = DesignSpec::train(&formula, &frame)?;
    let x = design.build(&frame)?;
    let y: Vec<f64> = idx.iter().map(|&i| data.rows[i].outcome as f64).collect();
    let events = y.iter().filter(|&&v| v == 1.0).count();
    if events == 0 || events == y.len() {
        return Err(Error::Degenerate(format!(
            "outcome is constant ({}) across all {} analysis rows",
            if events == 0 { 0 } else { 1 },
            y.len()
        )));
    }
    let mut w: Vec<f64> = idx.iter().map(|&i| data.rows[i].weight).collect();
    truncate_values(&mut w, spec.analysis_weights);
    if spec.use_sample_weights {
        for (wi, &i) in w.iter_mut().zip(&idx) {
            *wi *= data.rows[i].sample_weight.unwrap_or(1.0);
        }
    }
    let glm = fit_weighted_logistic(&x, &y, &w, &design.column_names, &spec.fit)?;
    if !glm.converged {
        log::warn!("outcome model did not converge in {} iterations", glm.iterations);
    }
    let ids: Vec<i64> = idx.iter().map(|&i| data.rows[i].id).collect();
    let robust = cluster_sandwich_covariance(&glm, &x, &y, &w, &ids)?;
    Ok(MsmFit {
        n_individuals: robust.cluster_count,
        n_rows: idx.len(),
        max_followup: idx.iter().map(|&i| data.rows[i].followup_time).max().unwrap_or(0),
        glm,
        robust,
        design,
        spec: spec.clone(),
        estimand: data.estimand,
        covariate_kinds: data
            .schema
            .covariates
            .iter()
            .map(|c| (c.name.clone(), c.kind))
            .collect(),
    })
}

/// Coefficient table with robust standard errors and Wald intervals.
pub fn summarize_msm(fit: &MsmFit) -> Vec<CoefficientRow> {
    coefficient_table(&fit.glm, &fit.robust.matrix)
}

/// Robust covariance restricted to the non-aliased coefficients.
pub fn active_robust(fit: &MsmFit) -> DMatrix<f64> {
    let a = fit.glm.active_columns();
    DMatrix::from_fn(a.len(), a.len(), |i, j| fit.robust.matrix[(a[i], a[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CovariateSpec;
    use crate::expansion::{ExpandedRow, ExpandedSchema};

    fn data(n: usize) -> ExpandedDataset {
        let rows = (0..n)
            .map(|i| ExpandedRow {
                id: (i / 4) as i64,
                trial_period: (i % 3) as i64,
                followup_time: (i % 4) as i64,
                outcome: (i % 7 == 0 || i % 11 == 0) as u8,
                weight: 1.0,
                treatment: (i % 2) as u8,
                assigned_treatment: (i % 2) as u8,
                dose: 0,
                covariates: vec![((i * 37) % 13) as f64 / 13.0],
                where_values: vec![(i % 5) as f64],
                sample_weight: None,
            })
            .collect();
        ExpandedDataset {
            rows,
            schema: ExpandedSchema {
                covariates: vec![CovariateSpec::continuous("x")],
                where_vars: vec!["g".into()],
                include_assigned_treatment: true,
                include_dose: false,
                has_sample_weight: false,
            },
            estimand: EstimandType::Itt,
        }
    }

    #[test]
    fn column_order() {
        let spec = MsmSpec {
            outcome_covariates: "x".into(),
            followup_terms: "ns(followup_time,3)".into(),
            ..Default::default()
        };
        let fit = fit_msm(&data(400), &spec).unwrap();
        assert_eq!(
            fit.column_names(),
            &[
                "(Intercept)",
                "assigned_treatment",
                "trial_period",
                "pow(trial_period,2)",
                "ns(followup_time,3)#1",
                "ns(followup_time,3)#2",
                "ns(followup_time,3)#3",
                "x"
            ]
        );
        assert_eq!(fit.robust.matrix.nrows(), 8);
    }

    #[test]
    fn weight_scaling_invariance() {
        let d = data(400);
        let spec = MsmSpec::default();
        let a = fit_msm(&d, &spec).unwrap();
        let mut d2 = d.clone();
        d2.rows.iter_mut().for_each(|r| r.weight = 3.5);
        let b = fit_msm(&d2, &spec).unwrap();
        for j in 0..a.glm.coefficients.len() {
            assert!((a.glm.coefficients[j] - b.glm.coefficients[j]).abs() < 1e-8);
        }
        assert!((&a.robust.matrix - &b.robust.matrix).amax() < 1e-8);
    }

    #[test]
    fn filters() {
        let d = data(400);
        let full = fit_msm(&d, &MsmSpec::default()).unwrap();
        let windowed = fit_msm(
            &d,
            &MsmSpec {
                first_followup: Some(0),
                last_followup: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(full.glm.coefficients, windowed.glm.coefficients);
        let sub = MsmSpec {
            where_case: Some(Predicate::parse("g >= 2").unwrap()),
            ..Default::default()
        };
        assert_eq!(fit_msm(&d, &sub).unwrap().n_rows, 240);
        let bad = MsmSpec {
            where_case: Some(Predicate::parse("nope == 1").unwrap()),
            ..Default::default()
        };
        assert!(matches!(fit_msm(&d, &bad), Err(Error::Schema(_))));
        let empty = MsmSpec {
            where_case: Some(Predicate::parse("g > 10").unwrap()),
            ..Default::default()
        };
        assert!(matches!(fit_msm(&d, &empty), Err(Error::EmptyData(_))));
    }

    #[test]
    fn all_zero_outcome_is_degenerate() {
        let mut d = data(100);
        d.rows.iter_mut().for_each(|r| r.outcome = 0);
        assert!(matches!(fit_msm(&d, &MsmSpec::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_trial_drops_trial_terms() {
        let mut d = data(400);
        d.rows.iter_mut().for_each(|r| r.trial_period = 0);
        let fit = fit_msm(&d, &MsmSpec::default()).unwrap();
        assert!(fit.glm.aliased[2] && fit.glm.aliased[3]);
        let table = summarize_msm(&fit);
        assert!(table[2].estimate.is_none());
    }

    #[test]
    fn as_treated_needs_sequence_terms() {
        let spec = MsmSpec::default();
        assert!(spec.validate(EstimandType::AsTreated).is_err());
        let spec = MsmSpec {
            model_var: "dose + pow(dose,2)".into(),
            ..Default::default()
        };
        assert!(spec.validate(EstimandType::AsTreated).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let fit = fit_msm(&data(200), &MsmSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("msm.json");
        fit.write_json(&p).unwrap();
        assert_eq!(MsmFit::read_json(&p).unwrap(), fit);
    }
}
