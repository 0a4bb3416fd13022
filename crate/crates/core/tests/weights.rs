mod common;

use approx::assert_relative_eq;
use nalgebra::DVector;

use common::*;
use trialforge::data::{ColumnMap, CovariateSpec, LongitudinalDataset, LongitudinalRecord};
use trialforge::error::Error;
use trialforge::expansion::{derive_time_on_regime, expand, EstimandType, ExpansionOptions};
use trialforge::simgen::{simulate_dataset, SimConfig};
use trialforge::weights::*;

fn sigmoid(e: f64) -> f64 {
    1.0 / (1.0 + (-e).exp())
}

fn simulated(n: usize, seed: u64) -> LongitudinalDataset {
    derive_time_on_regime(
        &simulate_dataset(&SimConfig {
            n,
            seed,
            ..Default::default()
        })
        .unwrap(),
    )
}

/// `(id, t, A, X1, C, eligible)` rows with a single binary covariate.
fn toy(rows: &[(i64, i64, u8, f64, u8, u8)]) -> LongitudinalDataset {
    let map = ColumnMap {
        covariates: vec![CovariateSpec::binary("X1")],
        ..ColumnMap::simulated()
    };
    let recs = rows
        .iter()
        .map(|&(id, t, a, x1, c, e)| LongitudinalRecord {
            id,
            period: t,
            treatment: a,
            outcome: 0,
            eligible: e,
            censored: c,
            covariates: vec![x1],
            time_on_regime: None,
        })
        .collect();
    LongitudinalDataset::new(recs, map).unwrap()
}

#[test]
fn saturated_censoring_model_reproduces_cell_means() {
    let ds = toy(&[
        (1, 0, 0, 0.0, 0, 1),
        (1, 1, 0, 0.0, 0, 0),
        (1, 2, 0, 0.0, 1, 0),
        (2, 0, 0, 1.0, 0, 1),
        (2, 1, 0, 1.0, 1, 0),
        (3, 0, 1, 0.0, 0, 1),
        (3, 1, 1, 1.0, 0, 0),
        (3, 2, 1, 1.0, 0, 0),
        (3, 3, 1, 1.0, 0, 0),
    ]);
    let spec = WeightSpec {
        cense_d_cov: "X1".into(),
        pool_cense: PoolCense::Both,
        stabilized: false,
        ..Default::default()
    };
    let models = fit_weight_models(&ds, &spec, EstimandType::Itt).unwrap();
    assert_eq!(models.labels(), vec!["cens_pool_d"]);
    let ratios = compute_period_ratios(&ds, &models, &spec, EstimandType::Itt).unwrap();
    // X1 = 0: 4 rows, 1 censored; X1 = 1: 5 rows, 1 censored
    for r in ds.records() {
        let expect = if r.covariates[0] == 0.0 { 4.0 / 3.0 } else { 5.0 / 4.0 };
        let i = ratios.locate(r.id, r.period).unwrap();
        assert_relative_eq!(ratios.r_c[i], expect, epsilon = 1e-8);
    }
}

#[test]
fn ratios_match_plug_in_arithmetic() {
    let ds = simulated(300, 8);
    let spec = WeightSpec {
        cense_d_cov: "X1".into(),
        cense_n_cov: "1".into(),
        switch_d_cov: "X1".into(),
        switch_n_cov: "1".into(),
        ..Default::default()
    };
    let mut models = fit_weight_models(&ds, &spec, EstimandType::Pp).unwrap();
    let set = |ms: &mut Vec<WeightModel>, coefs: [&[f64]; 2]| {
        for (m, c) in ms.iter_mut().zip(coefs) {
            m.fit.coefficients = DVector::from_column_slice(c);
        }
    };
    set(&mut models.censor_den, [&[1.5, -0.4], &[2.0, 0.3]]);
    set(&mut models.censor_num, [&[1.7], &[2.2]]);
    set(&mut models.switch_den, [&[-1.0, 0.8], &[1.2, -0.5]]);
    set(&mut models.switch_num, [&[-0.7], &[0.9]]);
    let ratios = compute_period_ratios(&ds, &models, &spec, EstimandType::Pp).unwrap();

    let recs = ds.records();
    for (i, r) in recs.iter().enumerate() {
        let x1 = r.covariates[0];
        let expect_c = if r.outcome == 0 {
            let (d, n) = if r.treatment == 0 {
                (1.5 - 0.4 * x1, 1.7)
            } else {
                (2.0 + 0.3 * x1, 2.2)
            };
            sigmoid(n) / sigmoid(d)
        } else {
            1.0
        };
        assert_relative_eq!(ratios.r_c[i], expect_c, epsilon = 1e-10);
        let has_prev = i > 0 && recs[i - 1].id == r.id;
        let expect_a = if has_prev {
            let (d, n) = if recs[i - 1].treatment == 0 {
                (-1.0 + 0.8 * x1, -0.7)
            } else {
                (1.2 - 0.5 * x1, 0.9)
            };
            let (pd, pn) = (sigmoid(d), sigmoid(n));
            if r.treatment == 1 {
                pn / pd
            } else {
                (1.0 - pn) / (1.0 - pd)
            }
        } else {
            1.0
        };
        assert_relative_eq!(ratios.r_a[i], expect_a, epsilon = 1e-10);
    }
}

#[test]
fn itt_censoring_models_have_expected_structure() {
    let ds = simulated(1000, 3);
    let models = fit_weight_models(&ds, &itt_weights(), EstimandType::Itt).unwrap();
    assert_eq!(models.labels(), vec!["cens_d0", "cens_d1", "cens_pool_n"]);
    let d0 = models.get("cens_d0").unwrap();
    let age = d0.fit.column_names.iter().position(|c| c == "age_s").unwrap();
    // censoring falls with age, so remaining uncensored rises with it
    assert!(d0.fit.coefficients[age] > 0.0);
    assert!(models.all().all(|m| m.fit.converged));
}

#[test]
fn pp_fits_switch_and_censoring_models() {
    let ds = simulated(1000, 3);
    let models = fit_weight_models(&ds, &pp_weights(), EstimandType::Pp).unwrap();
    assert_eq!(
        models.labels(),
        vec![
            "cens_d0",
            "cens_d1",
            "cens_n0",
            "cens_n1",
            "switch_d0",
            "switch_d1",
            "switch_n0",
            "switch_n1"
        ]
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("models.json");
    models.write_json(&path).unwrap();
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(json.as_array().map(Vec::len), Some(8));
}

#[test]
fn sustained_treatment_flags_separation() {
    let mut rows = Vec::new();
    for id in 0..12i64 {
        for t in 0..5i64 {
            let a = if id % 2 == 0 { 1 } else { (t > id % 4) as u8 };
            rows.push((id, t, a, ((id + t) % 2) as f64, 0, (t == 0) as u8));
        }
    }
    let ds = toy(&rows);
    let spec = WeightSpec {
        use_censor_weights: false,
        ..Default::default()
    };
    let models = fit_weight_models(&ds, &spec, EstimandType::AsTreated).unwrap();
    let m = models.get("switch_d1").unwrap();
    assert!(m.fit.separated || !m.fit.converged);
    assert!(!models.get("switch_d0").unwrap().fit.separated);
}

#[test]
fn eligible_wts_excludes_rows_and_leaves_unit_ratio() {
    let ds = simulated(600, 12);
    let spec = WeightSpec {
        eligible_wts_0: Some("X3".into()),
        switch_d_cov: "X1 + X2".into(),
        use_censor_weights: false,
        ..Default::default()
    };
    let models = fit_weight_models(&ds, &spec, EstimandType::AsTreated).unwrap();
    let ratios = compute_period_ratios(&ds, &models, &spec, EstimandType::AsTreated).unwrap();
    let recs = ds.records();
    let x3 = ds.covariate_index("X3").unwrap();
    let mut in_stratum0 = 0;
    for i in 1..recs.len() {
        if recs[i].id != recs[i - 1].id || recs[i - 1].treatment != 0 {
            continue;
        }
        if recs[i].covariates[x3] == 0.0 {
            assert_eq!(ratios.r_a[i], 1.0);
        } else {
            in_stratum0 += 1;
        }
    }
    assert_eq!(models.get("switch_d0").unwrap().fit.n_obs, in_stratum0);
}

#[test]
fn weights_restart_at_each_trial_baseline() {
    let ds = simulated(300, 21);
    let models = fit_weight_models(&ds, &itt_weights(), EstimandType::Itt).unwrap();
    let ratios = compute_period_ratios(&ds, &models, &itt_weights(), EstimandType::Itt).unwrap();
    let ex = attach_weights(
        expand(&ds, EstimandType::Itt, &ExpansionOptions::default()).unwrap(),
        &ratios,
    )
    .unwrap();
    let mut prev: Option<(i64, i64, f64)> = None;
    for r in &ex.rows {
        if r.followup_time == 0 {
            assert_eq!(r.weight, 1.0);
        } else {
            let (id, m, w) = prev.unwrap();
            assert_eq!((id, m), (r.id, r.trial_period));
            let i = ratios.locate(r.id, r.period() - 1).unwrap();
            assert_relative_eq!(r.weight, w * ratios.r_c[i], max_relative = 1e-14);
        }
        prev = Some((r.id, r.trial_period, r.weight));
    }
    assert!(ex.rows.iter().any(|r| r.weight != 1.0));
}

#[test]
fn itt_without_pooling_is_rejected() {
    let spec = WeightSpec::default();
    let err = fit_weight_models(&simulated(50, 1), &spec, EstimandType::Itt).unwrap_err();
    assert!(matches!(err, Error::Parameter(_)), "{err}");
}

#[test]
fn empty_stratum_is_reported() {
    let ds = toy(&[
        (1, 0, 0, 0.0, 0, 1),
        (1, 1, 0, 1.0, 1, 0),
        (2, 0, 0, 1.0, 0, 1),
        (2, 1, 0, 0.0, 0, 0),
    ]);
    let spec = WeightSpec {
        pool_cense: PoolCense::None,
        ..Default::default()
    };
    let err = fit_weight_models(&ds, &spec, EstimandType::Pp).unwrap_err();
    assert!(matches!(err, Error::EmptyStratum(_)), "{err}");
}
