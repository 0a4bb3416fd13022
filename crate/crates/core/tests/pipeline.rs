mod common;

use std::path::Path;

use common::*;
use trialforge::data::write_longitudinal_csv;
use trialforge::error::Error;
use trialforge::expansion::{EstimandType, ExpansionOptions};
use trialforge::msm::MsmSpec;
use trialforge::pipeline::*;
use trialforge::predict::PredictOptions;
use trialforge::sampling::SamplingOptions;
use trialforge::simgen::{simulate_dataset, SimConfig};
use trialforge::weights::{Truncation, WeightSpec};

fn write_input(dir: &Path, n: usize, seed: u64) {
    let ds = simulate_dataset(&SimConfig {
        n,
        seed,
        ..Default::default()
    })
    .unwrap();
    write_longitudinal_csv(&ds, dir.join("data.csv")).unwrap();
}

fn itt_config() -> RunConfig {
    RunConfig {
        input: "data.csv".into(),
        columns: trialforge::data::ColumnMap::simulated(),
        estimand: EstimandType::Itt,
        expansion: ExpansionOptions::default(),
        weights: itt_weights(),
        msm: MsmSpec {
            followup_terms: "ns(followup_time,3)".into(),
            ..analysis_msm()
        },
        sampling: None,
        prediction: Some(PredictionConfig {
            options: PredictOptions {
                samples: 30,
                ..Default::default()
            },
            ..Default::default()
        }),
        output_dir: "out".into(),
    }
}

fn names(record: &RunRecord) -> Vec<(&str, bool)> {
    record.stages.iter().map(|s| (s.name.as_str(), s.reused)).collect()
}

#[test]
fn itt_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    write_input(dir.path(), 600, 1);
    let record = run_pipeline(&itt_config(), dir.path(), false).unwrap();
    assert_eq!(
        names(&record),
        vec![("prepare", false), ("fit", false), ("predict", false)]
    );
    let out = dir.path().join("out");
    for f in [
        "expanded.csv",
        "weight_models.json",
        "msm.json",
        "prediction.csv",
        RECORD_FILE,
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert_eq!(record.msm_summary.len(), 12);
    assert_eq!(record.msm_converged, Some(true));
    assert_eq!(record.weight_models.len(), 3);
    assert_eq!(record.input_sha256, sha256_file(&dir.path().join("data.csv")).unwrap());

    let back = RunRecord::read(out.join(RECORD_FILE)).unwrap();
    assert_eq!(back.stages.len(), 3);
    assert_eq!(back.config, itt_config());
    let prediction = std::fs::read_to_string(out.join("prediction.csv")).unwrap();
    assert_eq!(prediction.lines().count(), 11);
}

#[test]
fn per_protocol_chunked_with_sampling() {
    let dir = tempfile::tempdir().unwrap();
    write_input(dir.path(), 800, 2);
    let cfg = RunConfig {
        estimand: EstimandType::Pp,
        expansion: ExpansionOptions {
            separate_files: true,
            chunk_size: 100,
            ..Default::default()
        },
        weights: WeightSpec {
            truncation: Truncation::P99,
            ..pp_weights()
        },
        msm: MsmSpec {
            use_sample_weights: true,
            ..analysis_msm()
        },
        sampling: Some(SamplingOptions {
            p_control: 0.5,
            seed: 4,
            ..Default::default()
        }),
        ..itt_config()
    };
    let record = run_pipeline(&cfg, dir.path(), false).unwrap();
    assert_eq!(
        names(&record),
        vec![
            ("prepare", false),
            ("sample", false),
            ("fit", false),
            ("predict", false)
        ]
    );
    let out = dir.path().join("out");
    let trials = record
        .stage("prepare")
        .unwrap()
        .outputs
        .iter()
        .filter(|f| f.path.starts_with("trials"))
        .count();
    assert!(trials > 0);
    assert_eq!(std::fs::read_dir(out.join("trials")).unwrap().count(), trials);
    assert!(out.join("sampled.csv").is_file());
    assert_eq!(record.sampling_seed, Some(4));
    assert_eq!(record.weight_models.len(), 8);
    let header = std::fs::read_to_string(out.join("sampled.csv"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(header.contains("sample_weight"));
}

#[test]
fn minimal_unweighted_run() {
    let dir = tempfile::tempdir().unwrap();
    write_input(dir.path(), 300, 3);
    let cfg = RunConfig {
        weights: WeightSpec {
            use_censor_weights: false,
            ..Default::default()
        },
        msm: MsmSpec::default(),
        prediction: None,
        ..itt_config()
    };
    let record = run_pipeline(&cfg, dir.path(), false).unwrap();
    assert_eq!(names(&record), vec![("prepare", false), ("fit", false)]);
    assert!(record.weight_models.is_empty());
    assert_eq!(record.msm_summary[1].name, "assigned_treatment");
}

#[test]
fn unchanged_stages_are_reused() {
    let dir = tempfile::tempdir().unwrap();
    write_input(dir.path(), 400, 5);
    let cfg = itt_config();
    let first = run_pipeline(&cfg, dir.path(), false).unwrap();
    let second = run_pipeline(&cfg, dir.path(), false).unwrap();
    assert_eq!(
        names(&second),
        vec![("prepare", true), ("fit", true), ("predict", true)]
    );
    assert_eq!(first.msm_summary, second.msm_summary);
    for (a, b) in first.stages.iter().zip(&second.stages) {
        assert_eq!(a.key, b.key);
    }

    // a new prediction seed only reruns prediction
    let mut reseeded = cfg.clone();
    reseeded.prediction.as_mut().unwrap().options.seed = 99;
    let third = run_pipeline(&reseeded, dir.path(), false).unwrap();
    assert_eq!(
        names(&third),
        vec![("prepare", true), ("fit", true), ("predict", false)]
    );

    let forced = run_pipeline(&reseeded, dir.path(), true).unwrap();
    assert!(forced.stages.iter().all(|s| !s.reused));

    // a damaged artifact invalidates its stage and everything after it
    std::fs::write(dir.path().join("out/expanded.csv"), "garbage").unwrap();
    let repaired = run_pipeline(&reseeded, dir.path(), false).unwrap();
    assert_eq!(names(&repaired)[0], ("prepare", false));
    assert_eq!(repaired.msm_summary, first.msm_summary);
}

#[test]
fn changed_input_reruns_everything() {
    let dir = tempfile::tempdir().unwrap();
    write_input(dir.path(), 300, 6);
    let cfg = RunConfig {
        prediction: None,
        ..itt_config()
    };
    run_pipeline(&cfg, dir.path(), false).unwrap();
    write_input(dir.path(), 300, 7);
    let again = run_pipeline(&cfg, dir.path(), false).unwrap();
    assert!(again.stages.iter().all(|s| !s.reused));
}

#[test]
fn failure_is_recorded_with_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    write_input(dir.path(), 300, 8);
    let cfg = RunConfig {
        msm: MsmSpec {
            outcome_covariates: "not_a_column".into(),
            ..Default::default()
        },
        prediction: None,
        ..itt_config()
    };
    let err = run_pipeline(&cfg, dir.path(), false).unwrap_err();
    assert!(matches!(err, Error::Stage { .. }), "{err}");
    let record = RunRecord::read(dir.path().join("out").join(RECORD_FILE)).unwrap();
    assert_eq!(record.failed_stage.as_deref(), Some("fit"));
    assert!(record.error.as_deref().unwrap().contains("not_a_column"));
    assert_eq!(names(&record), vec![("prepare", false)]);
}

#[test]
fn missing_input_fails_in_load() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_pipeline(&itt_config(), dir.path(), false).unwrap_err();
    let record = RunRecord::read(dir.path().join("out").join(RECORD_FILE)).unwrap();
    assert_eq!(record.failed_stage.as_deref(), Some("load"), "{err}");
}

#[test]
fn config_round_trips_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let cfg = itt_config();
    cfg.write(&path).unwrap();
    assert_eq!(RunConfig::read(&path).unwrap(), cfg);

    let minimal = r#"{"input": "d.csv", "estimand": "ITT", "output_dir": "o",
                     "weights": {"pool_cense": "numerator"}}"#;
    let parsed = RunConfig::from_json_str(minimal).unwrap();
    assert_eq!(parsed.columns, trialforge::data::ColumnMap::simulated());
    assert!(RunConfig::from_json_str(r#"{"input": "d.csv", "estimand": "ITT", "output_dir": "o"}"#).is_err());
}
