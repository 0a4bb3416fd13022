//! Per-protocol analysis streamed through per-trial CSV files, so the
//! expanded data never has to fit in memory at once.

use trialforge::expansion::{
    derive_time_on_regime, expand_chunked, read_trial_files, EstimandType, ExpansionOptions, TrialFileSink,
};
use trialforge::msm::{fit_msm, MsmSpec};
use trialforge::predict::{marginal_effect, NewData, PredictOptions};
use trialforge::simgen::{simulate_dataset, SimConfig};
use trialforge::weights::{
    compute_period_ratios, fit_weight_models, truncate_weights, PoolCense, Truncation, WeightSpec, WeightingSink,
};

const COVARIATES: &str = "X1 + X2 + X3 + X4 + age_s";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = derive_time_on_regime(&simulate_dataset(&SimConfig {
        n: 3000,
        seed: 11,
        ..Default::default()
    })?);
    let spec = WeightSpec {
        switch_d_cov: format!("{COVARIATES} + time_on_regime + pow(time_on_regime,2)"),
        switch_n_cov: "X3 + X4 + time_on_regime + pow(time_on_regime,2)".into(),
        cense_d_cov: COVARIATES.into(),
        cense_n_cov: "X3 + X4".into(),
        pool_cense: PoolCense::None,
        ..Default::default()
    };
    let models = fit_weight_models(&ds, &spec, EstimandType::Pp)?;
    println!("weight models: {}", models.labels().join(", "));
    let ratios = compute_period_ratios(&ds, &models, &spec, EstimandType::Pp)?;

    let dir = tempfile::tempdir()?;
    let opts = ExpansionOptions {
        separate_files: true,
        chunk_size: 250,
        outcome_covariates: ["X1", "X2", "X3", "X4", "age_s"].map(String::from).to_vec(),
        ..Default::default()
    };
    let mut sink = WeightingSink {
        inner: TrialFileSink::new(dir.path(), EstimandType::Pp)?,
        ratios: &ratios,
        estimand: EstimandType::Pp,
    };
    let manifest = expand_chunked(&ds, EstimandType::Pp, &opts, &mut sink)?;
    for f in &manifest.files {
        println!(
            "  {:<14} {:>6} rows",
            f.path.file_name().unwrap().to_string_lossy(),
            f.rows
        );
    }

    let data = truncate_weights(read_trial_files(&manifest)?, Truncation::P99);
    let fit = fit_msm(
        &data,
        &MsmSpec {
            outcome_covariates: COVARIATES.into(),
            ..Default::default()
        },
    )?;
    println!(
        "assigned_treatment {:.3} (robust se {:.3})",
        fit.coefficient("assigned_treatment").unwrap(),
        fit.robust_se("assigned_treatment").unwrap()
    );
    let newdata = NewData::from_expanded(&data, |r| r.trial_period == 0)?;
    let pred = marginal_effect(
        &fit,
        &newdata,
        &PredictOptions {
            conf_int: false,
            ..Default::default()
        },
    )?;
    let last = pred.rows.last().unwrap();
    println!(
        "risk difference at follow-up {}: {:+.4}",
        last.followup_time, last.difference
    );
    Ok(())
}
