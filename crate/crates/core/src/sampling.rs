//! Case-control sampling of expanded rows.
//!
//! Every case is kept. Each control is kept independently with probability
//! `p_control` and then weighted by `1 / p_control`. The keep decision for a
//! row depends only on the seed and the row's `(id, trial_period,
//! followup_time)`, so it does not change with row order or chunking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpandedDataset;
use crate::predicate::Predicate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingOptions {
    pub p_control: f64,
    pub seed: u64,
    pub subset_condition: Option<Predicate>,
    /// Sort the output by `(id, trial_period, followup_time)`.
    pub sort: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            p_control: 0.01,
            seed: 1,
            subset_condition: None,
            sort: true,
        }
    }
}

impl SamplingOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_control > 0.0 && self.p_control <= 1.0) {
            return Err(Error::Parameter(format!(
                "p_control must lie in (0, 1], got {}",
                self.p_control
            )));
        }
        Ok(())
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform on `[0, 1)` determined by the seed and the row key.
pub fn keyed_uniform(seed: u64, id: i64, trial_period: i64, followup_time: i64) -> f64 {
    let mut h = mix(seed);
    for k in [id, trial_period, followup_time] {
        h = mix(h ^ k as u64);
    }
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Keeps all cases and a `p_control` fraction of controls, adding `sample_weight`.
pub fn case_control_sample(data: &ExpandedDataset, opts: &SamplingOptions) -> Result<ExpandedDataset> {
    opts.validate()?;
    let mut rows = Vec::new();
    let (mut cases, mut controls) = (0usize, 0usize);
    for r in &data.rows {
        if let Some(p) = &opts.subset_condition {
            if !p.eval(|name| data.value(r, name))? {
                continue;
            }
        }
        let weight = if r.outcome == 1 {
            cases += 1;
            1.0
        } else if keyed_uniform(opts.seed, r.id, r.trial_period, r.followup_time) < opts.p_control {
            controls += 1;
            1.0 / opts.p_control
        } else {
            continue;
        };
        let mut kept = r.clone();
        kept.sample_weight = Some(weight);
        rows.push(kept);
    }
    if cases > 0 && controls < 10 * cases {
        log::warn!("sampled {controls} controls for {cases} cases; fewer than ten controls per case");
    }
    let mut out = ExpandedDataset {
        rows,
        schema: data.schema.clone(),
        estimand: data.estimand,
    };
    out.schema.has_sample_weight = true;
    if opts.sort {
        out.sort();
    }
    Ok(out)
}
