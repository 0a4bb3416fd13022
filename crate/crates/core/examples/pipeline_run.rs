//! A configured end-to-end run with cached stages. The second run reuses
//! every artifact; changing only the prediction seed reruns only prediction.

use trialforge::data::write_longitudinal_csv;
use trialforge::pipeline::{run_pipeline, RunConfig, RECORD_FILE};
use trialforge::simgen::{simulate_dataset, SimConfig};

const CONFIG: &str = r#"{
    "input": "data.csv",
    "estimand": "PP",
    "expansion": {"separate_files": true, "chunk_size": 200},
    "weights": {
        "switch_d_cov": "X1 + X2 + X3 + X4 + age_s + time_on_regime + pow(time_on_regime,2)",
        "switch_n_cov": "X3 + X4 + time_on_regime + pow(time_on_regime,2)",
        "cense_d_cov": "X1 + X2 + X3 + X4 + age_s",
        "cense_n_cov": "X3 + X4",
        "truncation": "p99"
    },
    "msm": {"outcome_covariates": "X1 + X2 + X3 + X4 + age_s", "use_sample_weights": true},
    "sampling": {"p_control": 0.3, "seed": 5},
    "prediction": {"samples": 50, "predict_times": [0, 3, 6, 9]},
    "output_dir": "out"
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let ds = simulate_dataset(&SimConfig {
        n: 1500,
        ..Default::default()
    })?;
    write_longitudinal_csv(&ds, dir.path().join("data.csv"))?;
    let mut cfg = RunConfig::from_json_str(CONFIG)?;

    for label in ["first run", "second run", "new seed"] {
        if label == "new seed" {
            cfg.prediction.as_mut().unwrap().options.seed = 2;
        }
        let record = run_pipeline(&cfg, dir.path(), false)?;
        let stages: Vec<String> = record
            .stages
            .iter()
            .map(|s| format!("{}{}", s.name, if s.reused { " (reused)" } else { "" }))
            .collect();
        println!("{label:<11} {}", stages.join(", "));
    }

    let out = dir.path().join("out");
    println!("\nrun record: {}", out.join(RECORD_FILE).display());
    print!("{}", std::fs::read_to_string(out.join("prediction.csv"))?);
    Ok(())
}
