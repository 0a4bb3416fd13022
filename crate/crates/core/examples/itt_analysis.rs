//! Intention-to-treat analysis: censoring weights, the pooled outcome model
//! and marginal cumulative incidence curves with simulation intervals.

use trialforge::expansion::{derive_time_on_regime, expand, EstimandType, ExpansionOptions};
use trialforge::msm::{fit_msm, summarize_msm, MsmSpec};
use trialforge::predict::{marginal_effect, NewData, PredictOptions};
use trialforge::simgen::{simulate_dataset, SimConfig};
use trialforge::weights::{attach_weights, compute_period_ratios, fit_weight_models, PoolCense, WeightSpec};

const COVARIATES: &str = "X1 + X2 + X3 + X4 + age_s";

fn main() -> trialforge::error::Result<()> {
    let ds = derive_time_on_regime(&simulate_dataset(&SimConfig {
        n: 2000,
        seed: 7,
        ..Default::default()
    })?);

    // censoring depends on covariates; the numerator is pooled over arms
    let spec = WeightSpec {
        cense_d_cov: COVARIATES.into(),
        cense_n_cov: "X3 + X4".into(),
        pool_cense: PoolCense::Numerator,
        ..Default::default()
    };
    let models = fit_weight_models(&ds, &spec, EstimandType::Itt)?;
    for m in models.all() {
        println!("{:<12} n={:<6} converged={}", m.label, m.fit.n_obs, m.fit.converged);
    }
    let ratios = compute_period_ratios(&ds, &models, &spec, EstimandType::Itt)?;
    let opts = ExpansionOptions {
        outcome_covariates: ["X1", "X2", "X3", "X4", "age_s"].map(String::from).to_vec(),
        ..Default::default()
    };
    let data = attach_weights(expand(&ds, EstimandType::Itt, &opts)?, &ratios)?;
    let weights: Vec<f64> = data.rows.iter().map(|r| r.weight).collect();
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    println!("{} expanded rows, mean weight {mean:.3}", data.len());

    let fit = fit_msm(
        &data,
        &MsmSpec {
            outcome_covariates: COVARIATES.into(),
            ..Default::default()
        },
    )?;
    println!("\n{:<24} {:>9} {:>9}", "term", "estimate", "robust se");
    for row in summarize_msm(&fit) {
        println!(
            "{:<24} {:>9.4} {:>9.4}",
            row.name,
            row.estimate.unwrap_or(f64::NAN),
            row.std_error.unwrap_or(f64::NAN)
        );
    }

    let newdata = NewData::from_expanded(&data, |r| r.trial_period == 0)?;
    let pred = marginal_effect(&fit, &newdata, &PredictOptions::default())?;
    println!("\n  k   untreated   treated   difference [95% interval]");
    for r in &pred.rows {
        println!(
            "{:>3}   {:>9.4} {:>9.4}   {:>+8.4} [{:+.4}, {:+.4}]",
            r.followup_time,
            r.value_0,
            r.value_1,
            r.difference,
            r.difference_lower.unwrap(),
            r.difference_upper.unwrap()
        );
    }
    Ok(())
}
