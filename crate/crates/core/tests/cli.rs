mod common;

use std::path::Path;

use trialforge::cli::run;
use trialforge::data::write_longitudinal_csv;
use trialforge::msm::MsmFit;
use trialforge::pipeline::{RunConfig, RunRecord, RECORD_FILE};

fn cli(workdir: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["trialforge", "--quiet", "--workdir", workdir.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(argv)
}

#[test]
fn step_by_step_commands() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    assert_eq!(
        cli(w, &["simulate", "--n", "600", "--seed", "3", "--out", "data.csv"]),
        0
    );
    assert!(w.join("data.csv").is_file());

    let weights = [
        "--cense-d-cov",
        "X1 + X2 + X3 + X4 + age_s",
        "--cense-n-cov",
        "X3 + X4",
        "--switch-d-cov",
        "X1 + X2 + X3 + X4 + age_s + time_on_regime",
        "--switch-n-cov",
        "X3 + X4",
    ];
    let mut prepare = vec!["prepare", "--input", "data.csv", "--estimand", "PP", "--separate-files"];
    prepare.extend_from_slice(&[
        "--chunk-size",
        "50",
        "--out-dir",
        "trials",
        "--outcome-cov",
        "X1,X2,X3,X4,age_s",
    ]);
    prepare.extend_from_slice(&weights);
    prepare.extend_from_slice(&["--save-config", "prepare.json"]);
    assert_eq!(cli(w, &prepare), 0);
    assert!(w.join("trials/trial_0.csv").is_file());
    assert!(w.join("trials/weight_models.json").is_file());
    let saved = RunConfig::read(w.join("prepare.json")).unwrap();
    assert_eq!(saved.expansion.chunk_size, 50);

    let data = ["--input", "trials", "--estimand", "PP"];
    let mut sample = vec!["sample", "--p-control", "0.5", "--seed", "2", "--out", "sampled.csv"];
    sample.extend_from_slice(&data);
    assert_eq!(cli(w, &sample), 0);

    let fit = [
        "fit",
        "--input",
        "sampled.csv",
        "--estimand",
        "PP",
        "--outcome-cov",
        "X1 + X2 + X3 + X4 + age_s",
        "--use-sample-weights",
        "--out",
        "msm.json",
    ];
    assert_eq!(cli(w, &fit), 0);
    let model = MsmFit::read_json(w.join("msm.json")).unwrap();
    assert!(model.spec.use_sample_weights);

    let predict = [
        "predict",
        "--model",
        "msm.json",
        "--newdata",
        "trials/trial_0.csv",
        "--predict-times",
        "0:5",
        "--samples",
        "20",
        "--out",
        "pred.csv",
    ];
    assert_eq!(cli(w, &predict), 0);
    let pred = std::fs::read_to_string(w.join("pred.csv")).unwrap();
    assert_eq!(pred.lines().count(), 7);
    assert!(pred.lines().next().unwrap().starts_with("followup_time,"));

    // snake_case aliases are accepted too
    let mut alias = vec!["predict", "--model", "msm.json", "--newdata", "trials/trial_0.csv"];
    alias.extend_from_slice(&[
        "--predict_times",
        "0,2,4",
        "--no_conf_int",
        "--type",
        "survival",
        "--out",
        "s.csv",
    ]);
    assert_eq!(cli(w, &alias), 0);
}

#[test]
fn run_command_uses_config_and_cache() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    assert_eq!(cli(w, &["simulate", "--n", "400", "--out", "data.csv"]), 0);
    let config = r#"{
        "input": "data.csv",
        "estimand": "ITT",
        "weights": {"cense_d_cov": "X1 + X2 + X3 + X4 + age_s", "cense_n_cov": "X3 + X4", "pool_cense": "numerator"},
        "msm": {"outcome_covariates": "X1 + X2 + X3 + X4 + age_s"},
        "prediction": {"samples": 20, "predict_times": [0, 5, 9]},
        "output_dir": "out"
    }"#;
    std::fs::write(w.join("run.json"), config).unwrap();
    assert_eq!(cli(w, &["run", "--config", "run.json"]), 0);
    assert_eq!(cli(w, &["run", "--config", "run.json"]), 0);
    let record = RunRecord::read(w.join("out").join(RECORD_FILE)).unwrap();
    assert!(record.stages.iter().all(|s| s.reused));
    assert_eq!(cli(w, &["run", "--config", "run.json", "--force"]), 0);
    let record = RunRecord::read(w.join("out").join(RECORD_FILE)).unwrap();
    assert!(record.stages.iter().all(|s| !s.reused));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    assert_eq!(cli(w, &["simulate", "--bogus"]), 1);
    assert_eq!(cli(w, &["--help"]), 0);
    assert_eq!(cli(w, &["fit", "--help"]), 0);
    assert_eq!(cli(w, &["fit", "--input", "missing.csv", "--out", "m.json"]), 1);
    assert_eq!(
        cli(
            w,
            &["sample", "--input", "missing.csv", "--p-control", "2", "--out", "x.csv"]
        ),
        1
    );

    // no outcome events: the outcome model cannot be fitted
    write_longitudinal_csv(&common::golden_dataset(), w.join("golden.csv")).unwrap();
    let prepare = [
        "prepare",
        "--input",
        "golden.csv",
        "--no-censor-weights",
        "--out-dir",
        "g",
    ];
    assert_eq!(cli(w, &prepare), 0);
    assert_eq!(cli(w, &["fit", "--input", "g/expanded.csv", "--out", "g/msm.json"]), 2);
}
