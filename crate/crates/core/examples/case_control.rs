//! Case-control sampling of the expanded data: every event is kept, controls
//! are kept with probability `p` and weighted by `1/p`. The fitted treatment
//! effect barely moves while the data shrinks.

use trialforge::expansion::{derive_time_on_regime, expand, EstimandType, ExpansionOptions};
use trialforge::msm::{fit_msm, MsmSpec};
use trialforge::predicate::Predicate;
use trialforge::sampling::{case_control_sample, SamplingOptions};
use trialforge::simgen::{simulate_dataset, SimConfig};

fn main() -> trialforge::error::Result<()> {
    let ds = derive_time_on_regime(&simulate_dataset(&SimConfig {
        n: 5000,
        seed: 3,
        ..Default::default()
    })?);
    let opts = ExpansionOptions {
        outcome_covariates: ["X1", "X2", "X3", "X4", "age_s"].map(String::from).to_vec(),
        ..Default::default()
    };
    let data = expand(&ds, EstimandType::Itt, &opts)?;
    let spec = MsmSpec {
        outcome_covariates: "X1 + X2 + X3 + X4 + age_s".into(),
        ..Default::default()
    };
    let full = fit_msm(&data, &spec)?;
    println!(
        "full data: {:>7} rows, effect {:+.4}",
        data.len(),
        full.coefficient("assigned_treatment").unwrap()
    );

    let sampled_spec = MsmSpec {
        use_sample_weights: true,
        ..spec
    };
    for p in [0.5, 0.2, 0.05] {
        let s = case_control_sample(
            &data,
            &SamplingOptions {
                p_control: p,
                seed: 1,
                ..Default::default()
            },
        )?;
        let fit = fit_msm(&s, &sampled_spec)?;
        println!(
            "p = {p:<4}    {:>7} rows, effect {:+.4} (robust se {:.4})",
            s.len(),
            fit.coefficient("assigned_treatment").unwrap(),
            fit.robust_se("assigned_treatment").unwrap()
        );
    }

    // sampling can be restricted to a subset of the trials
    let early = case_control_sample(
        &data,
        &SamplingOptions {
            p_control: 0.1,
            subset_condition: Some(Predicate::parse("trial_period <= 2")?),
            ..Default::default()
        },
    )?;
    println!("trials 0-2 only: {} rows", early.len());
    Ok(())
}
