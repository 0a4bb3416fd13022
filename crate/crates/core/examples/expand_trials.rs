//! Expand a handful of records into a sequence of emulated trials and show
//! how the ITT and per-protocol versions differ.

use trialforge::data::{ColumnMap, LongitudinalDataset, LongitudinalRecord};
use trialforge::expansion::{derive_time_on_regime, expand, EstimandType, ExpansionOptions};

fn main() -> trialforge::error::Result<()> {
    // one person: untreated for two periods, then starts treatment, briefly stops at period 5
    let treatment = [0, 0, 1, 1, 1, 0, 1];
    let records = treatment
        .iter()
        .enumerate()
        .map(|(t, &a)| LongitudinalRecord {
            id: 1,
            period: t as i64,
            treatment: a,
            outcome: 0,
            eligible: (t <= 2) as u8,
            censored: 0,
            covariates: vec![40.0 + t as f64],
            time_on_regime: None,
        })
        .collect();
    let map = ColumnMap {
        covariates: vec![trialforge::data::CovariateSpec::continuous("age")],
        ..ColumnMap::simulated()
    };
    let ds = derive_time_on_regime(&LongitudinalDataset::new(records, map)?);
    let opts = ExpansionOptions {
        outcome_covariates: vec!["age".into()],
        ..Default::default()
    };

    for estimand in [EstimandType::Itt, EstimandType::Pp] {
        let ex = expand(&ds, estimand, &opts)?;
        println!("{estimand:?}: {} rows", ex.len());
        println!("  trial  k  assigned  received  age");
        for r in &ex.rows {
            println!(
                "  {:>5} {:>2} {:>9} {:>9} {:>4}",
                r.trial_period,
                r.followup_time,
                r.assigned_treatment,
                r.treatment,
                ex.value(r, "age").unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
