//! Synthetic person-period data with time-varying confounding.
//!
//! For visits `j = 0..=max_visit`, with `A_{-1} = 0`:
//!
//! ```text
//! X1_j ~ Bernoulli(logit^-1(-A_{j-1}))          X3 ~ Bernoulli(0.5)
//! X2_j ~ N(-0.3 A_{j-1}, 1)                     X4 ~ N(0, 1)
//! age_j = age_0 + j, age_0 ~ N(35, 12^2)        age_s = (age - 35) / 12
//! logit P(A_j = 1) =       A_{j-1} + 0.5 X1 + 0.5 X2 - 0.2 X3 +     X4 - 0.3 age_s
//! logit P(Y_j = 1) = -5 - 1.2 A_j   + 0.5 X1 + 0.5 X2 +     X3 +     X4 + 0.5 age_s
//! logit P(C_j = 1) = -1 -     A_{j-1} - 0.5 X1 + 0.5 X2 - 0.2 X3 + 0.2 X4 -     age_s
//! ```
//!
//! A visit is eligible when `age >= 18` and there has been no treatment before.
//! Visits before the first eligible one are dropped, and follow-up ends at the
//! first event or censoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnMap, LongitudinalDataset, LongitudinalRecord};
use crate::error::{Error, Result};
use crate::glm::logistic;

/// Coefficients of one logistic equation. `treatment` multiplies the previous
/// treatment in the treatment and censoring equations and the current one in
/// the outcome equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitCoefficients {
    pub intercept: f64,
    pub treatment: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub x4: f64,
    pub age_s: f64,
}

impl LogitCoefficients {
    fn eta(&self, a: f64, x: &Covariates) -> f64 {
        self.intercept
            + self.treatment * a
            + self.x1 * x.x1
            + self.x2 * x.x2
            + self.x3 * x.x3
            + self.x4 * x.x4
            + self.age_s * x.age_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Coefficients {
    pub treatment: LogitCoefficients,
    pub outcome: LogitCoefficients,
    pub censoring: LogitCoefficients,
    /// Log-odds shift of `X1` per unit of previous treatment.
    pub x1_prev_treatment: f64,
    /// Mean shift of `X2` per unit of previous treatment.
    pub x2_prev_treatment: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Coefficients {
            treatment: LogitCoefficients {
                intercept: 0.0,
                treatment: 1.0,
                x1: 0.5,
                x2: 0.5,
                x3: -0.2,
                x4: 1.0,
                age_s: -0.3,
            },
            outcome: LogitCoefficients {
                intercept: -5.0,
                treatment: -1.2,
                x1: 0.5,
                x2: 0.5,
                x3: 1.0,
                x4: 1.0,
                age_s: 0.5,
            },
            censoring: LogitCoefficients {
                intercept: -1.0,
                treatment: -1.0,
                x1: -0.5,
                x2: 0.5,
                x3: -0.2,
                x4: 0.2,
                age_s: -1.0,
            },
            x1_prev_treatment: -1.0,
            x2_prev_treatment: -0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    /// Last visit index; visits run `0..=max_visit`.
    pub max_visit: usize,
    pub seed: u64,
    pub coefficients: Coefficients,
    pub censoring: bool,
    /// When false, treatment does not depend on the covariates.
    pub confounding: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 1000,
            max_visit: 9,
            seed: 1,
            coefficients: Coefficients::default(),
            censoring: true,
            confounding: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.coefficients;
        let all = [c.treatment, c.outcome, c.censoring];
        let finite = all.iter().all(|l| {
            [l.intercept, l.treatment, l.x1, l.x2, l.x3, l.x4, l.age_s]
                .iter()
                .all(|v| v.is_finite())
        }) && c.x1_prev_treatment.is_finite()
            && c.x2_prev_treatment.is_finite();
        if !finite {
            return Err(Error::Parameter("simulation coefficients must be finite".into()));
        }
        Ok(())
    }
}

struct Covariates {
    x1: f64,
    x2: f64,
    x3: f64,
    x4: f64,
    age_s: f64,
}

fn bernoulli(rng: &mut ChaCha20Rng, p: f64) -> u8 {
    (rng.random::<f64>() < p) as u8
}

fn simulate_individual(cfg: &SimConfig, id: i64, out: &mut Vec<LongitudinalRecord>) {
    let c = &cfg.coefficients;
    let mut treat = c.treatment;
    if !cfg.confounding {
        treat = LogitCoefficients {
            x1: 0.0,
            x2: 0.0,
            x3: 0.0,
            x4: 0.0,
            age_s: 0.0,
            ..treat
        };
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64);
    let age_dist = Normal::new(35.0, 12.0).expect("valid normal");
    let x3 = bernoulli(&mut rng, 0.5) as f64;
    let x4: f64 = StandardNormal.sample(&mut rng);
    let age0 = age_dist.sample(&mut rng);

    let start = out.len();
    let mut first_eligible = None;
    let mut ever_treated = false;
    let mut prev_a = 0.0;
    for j in 0..=cfg.max_visit {
        let x1 = bernoulli(&mut rng, logistic(c.x1_prev_treatment * prev_a)) as f64;
        let z: f64 = StandardNormal.sample(&mut rng);
        let x2 = c.x2_prev_treatment * prev_a + z;
        let age = age0 + j as f64;
        let cov = Covariates {
            x1,
            x2,
            x3,
            x4,
            age_s: (age - 35.0) / 12.0,
        };
        let a = bernoulli(&mut rng, logistic(treat.eta(prev_a, &cov)));
        let y = bernoulli(&mut rng, logistic(c.outcome.eta(a as f64, &cov)));
        let censored = if y == 0 && cfg.censoring {
            bernoulli(&mut rng, logistic(c.censoring.eta(prev_a, &cov)))
        } else {
            0
        };
        let eligible = (age >= 18.0 && !ever_treated) as u8;
        if eligible == 1 && first_eligible.is_none() {
            first_eligible = Some(out.len());
        }
        out.push(LongitudinalRecord {
            id,
            period: j as i64,
            treatment: a,
            outcome: y,
            eligible,
            censored,
            covariates: vec![x1, x2, x3, x4, age, cov.age_s],
            time_on_regime: None,
        });
        if y == 1 || censored == 1 {
            break;
        }
        ever_treated |= a == 1;
        prev_a = a as f64;
    }
    match first_eligible {
        Some(f) => {
            out.drain(start..f);
        }
        None => out.truncate(start),
    }
}

/// Simulates `cfg.n` individuals with ids `1..=n`, in the simulated column layout.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<LongitudinalDataset> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.n * (cfg.max_visit + 1));
    for id in 1..=cfg.n as i64 {
        simulate_individual(cfg, id, &mut records);
    }
    LongitudinalDataset::new(records, ColumnMap::simulated())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_dataset;

    #[test]
    fn empty_when_n_zero() {
        let ds = simulate_dataset(&SimConfig {
            n: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = SimConfig {
            n: 200,
            seed: 5,
            ..Default::default()
        };
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a.records(), b.records());
        assert!(validate_dataset(&a).is_clean());
        for recs in a.individuals() {
            assert_eq!(recs[0].eligible, 1);
            assert!(recs[..recs.len() - 1].iter().all(|r| r.outcome == 0 && r.censored == 0));
        }
    }

    #[test]
    fn without_censoring_follow_up_ends_at_event_or_last_visit() {
        let cfg = SimConfig {
            n: 300,
            censoring: false,
            ..Default::default()
        };
        let ds = simulate_dataset(&cfg).unwrap();
        for recs in ds.individuals() {
            let last = recs.last().unwrap();
            assert!(last.outcome == 1 || last.period == 9);
            assert!(recs.iter().all(|r| r.censored == 0));
        }
    }
}
