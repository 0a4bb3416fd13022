use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use trialforge::data::{ColumnMap, LongitudinalDataset, LongitudinalRecord};
use trialforge::expansion::{expand, EstimandType, ExpansionOptions, ModelVar};
use trialforge::predicate::Predicate;
use trialforge::predict::cumulative_incidence;
use trialforge::sampling::{case_control_sample, SamplingOptions};

/// Per-visit `(A, eligible, event)` where event 0 = none, 1 = outcome, 2 = censored.
type Visit = (u8, u8, u8);

fn visits() -> impl Strategy<Value = Vec<Vec<Visit>>> {
    let visit = (
        0u8..2,
        0u8..2,
        prop_oneof![8 => Just(0u8), 1 => Just(1u8), 1 => Just(2u8)],
    );
    prop::collection::vec(prop::collection::vec(visit, 1..9), 1..12)
}

fn dataset(people: &[Vec<Visit>]) -> LongitudinalDataset {
    let map = ColumnMap {
        covariates: vec![],
        ..ColumnMap::simulated()
    };
    let mut recs = Vec::new();
    for (id, vs) in people.iter().enumerate() {
        for (t, &(a, e, ev)) in vs.iter().enumerate() {
            recs.push(LongitudinalRecord {
                id: id as i64,
                period: t as i64,
                treatment: a,
                outcome: (ev == 1) as u8,
                eligible: e,
                censored: (ev == 2) as u8,
                covariates: vec![],
                time_on_regime: None,
            });
            if ev != 0 {
                break;
            }
        }
    }
    LongitudinalDataset::new(recs, map).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn expansion_invariants(people in visits()) {
        let ds = dataset(&people);
        let opts = ExpansionOptions { model_var: vec![ModelVar::AssignedTreatment, ModelVar::Dose], ..Default::default() };
        let itt = expand(&ds, EstimandType::Itt, &opts).unwrap();
        let pp = expand(&ds, EstimandType::Pp, &opts).unwrap();
        let at = expand(&ds, EstimandType::AsTreated, &opts).unwrap();

        let keys = |rows: &[trialforge::expansion::ExpandedRow]| -> BTreeSet<(i64, i64, i64)> {
            rows.iter().map(|r| (r.id, r.trial_period, r.followup_time)).collect()
        };
        prop_assert!(keys(&pp.rows).is_subset(&keys(&itt.rows)));
        prop_assert!(pp.rows.iter().all(|r| r.treatment == r.assigned_treatment));

        let recs = ds.records();
        let last: BTreeMap<i64, i64> = recs.iter().map(|r| (r.id, r.period)).collect();
        let mut trials: BTreeMap<(i64, i64), Vec<i64>> = BTreeMap::new();
        for r in &itt.rows {
            trials.entry((r.id, r.trial_period)).or_default().push(r.followup_time);
        }
        for (&(id, m), ks) in &trials {
            let base = recs.iter().find(|r| r.id == id && r.period == m).unwrap();
            prop_assert_eq!(base.eligible, 1);
            // ITT follows every trial to the end of the record
            prop_assert_eq!(ks.clone(), (0..=last[&id] - m).collect::<Vec<_>>());
        }
        let eligible = recs.iter().filter(|r| r.eligible == 1).count();
        prop_assert_eq!(trials.len(), eligible);

        for r in &at.rows {
            prop_assert!(r.dose as i64 <= r.followup_time + 1);
        }
        let mut pp_trials: BTreeMap<(i64, i64), Vec<i64>> = BTreeMap::new();
        for r in &pp.rows {
            pp_trials.entry((r.id, r.trial_period)).or_default().push(r.followup_time);
        }
        for ks in pp_trials.values() {
            prop_assert_eq!(ks.clone(), (0..ks.len() as i64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampling_ignores_input_order(people in visits(), seed in 0u64..1000, p in 0.05f64..1.0, perm_seed in any::<u64>()) {
        let ds = dataset(&people);
        let data = expand(&ds, EstimandType::Itt, &ExpansionOptions::default()).unwrap();
        let opts = SamplingOptions { p_control: p, seed, ..Default::default() };
        let a = case_control_sample(&data, &opts).unwrap();
        let mut shuffled = data.clone();
        let n = shuffled.rows.len();
        let mut state = perm_seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.rows.swap(i, (state >> 33) as usize % (i + 1));
        }
        let b = case_control_sample(&shuffled, &opts).unwrap();
        prop_assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn cumulative_incidence_is_a_distribution(h in prop::collection::vec(0.0f64..=1.0, 0..40)) {
        let ci = cumulative_incidence(&h);
        prop_assert_eq!(ci.len(), h.len());
        let mut prev = 0.0;
        for &c in &ci {
            prop_assert!(c >= prev - 1e-15 && c <= 1.0 + 1e-12);
            prev = c;
        }
    }

    #[test]
    fn predicate_display_round_trips(
        clauses in prop::collection::vec(("[A-Za-z_][A-Za-z0-9_]{0,8}", 0usize..6, -1e6f64..1e6), 1..4)
    ) {
        let ops = ["==", "!=", "<", "<=", ">", ">="];
        let src = clauses.iter().map(|(v, o, x)| format!("{v} {} {x}", ops[*o])).collect::<Vec<_>>().join(" && ");
        let p = Predicate::parse(&src).unwrap();
        prop_assert_eq!(p.clauses.len(), clauses.len());
        prop_assert_eq!(Predicate::parse(&p.to_string()).unwrap(), p);
    }
}
