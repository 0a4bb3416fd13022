//! Command-line front end. Exit codes: 0 success, 1 invalid input or usage,
//! 2 numerical failure (and non-convergence under `--strict`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{load_longitudinal_csv, write_longitudinal_csv, ColumnMap, CovariateKind, CovariateSpec};
use crate::error::{Error, Result};
use crate::expansion::{
    derive_time_on_regime, expand, expand_chunked, read_expanded_csv, read_trial_files, scan_trial_dir,
    write_expanded_csv, EstimandType, ExpansionOptions, ModelVar, TrialFileSink,
};
use crate::glm::{CoefficientRow, FitOptions};
use crate::msm::{fit_msm, summarize_msm, MsmFit, MsmSpec};
use crate::pipeline::{run_pipeline, PredictionConfig, RunConfig};
use crate::predicate::Predicate;
use crate::predict::{marginal_effect, NewData, PredictOptions, PredictionType};
use crate::sampling::{case_control_sample, SamplingOptions};
use crate::simgen::{simulate_dataset, SimConfig};
use crate::weights::{
    attach_weights, compute_period_ratios, fit_weight_models, truncate_weights, PoolCense, Truncation, WeightSpec,
    WeightingSink,
};

#[derive(Debug, Parser)]
#[command(name = "trialforge", version, about = "Sequential target trial emulation")]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Treat non-converged model fits as failures (exit code 2).
    #[arg(long, global = true)]
    pub strict: bool,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, env = "TRIALFORGE_WORKDIR")]
    pub workdir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Simulate a person-period dataset with time-varying confounding.
    Simulate(SimulateArgs),
    /// Fit weight models and expand the data into sequential trials.
    Prepare(PrepareArgs),
    /// Case-control sample an expanded dataset.
    Sample(SampleArgs),
    /// Fit the weighted outcome model to an expanded dataset.
    Fit(FitArgs),
    /// Predict marginal cumulative incidence from a fitted outcome model.
    Predict(PredictArgs),
    /// Run the whole pipeline from a JSON configuration.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "max-visit", visible_alias = "max_visit", default_value_t = 9)]
    pub max_visit: usize,
    #[arg(long = "no-censoring", visible_alias = "no_censoring")]
    pub no_censoring: bool,
    #[arg(long = "no-confounding", visible_alias = "no_confounding")]
    pub no_confounding: bool,
    /// JSON file with coefficient overrides.
    #[arg(long)]
    pub coefficients: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ColumnArgs {
    #[arg(long, default_value = "ID")]
    pub id: String,
    #[arg(long, default_value = "t")]
    pub period: String,
    #[arg(long, default_value = "A")]
    pub treatment: String,
    #[arg(long, default_value = "Y")]
    pub outcome: String,
    #[arg(long, default_value = "eligible")]
    pub eligible: String,
    /// Censoring indicator column; pass an empty value for none.
    #[arg(long, visible_alias = "cense", default_value = "C")]
    pub censored: String,
    /// Covariate columns as `name[:binary|:categorical]`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "X1:binary,X2,X3:binary,X4,age,age_s")]
    pub covariates: Vec<String>,
}

impl ColumnArgs {
    fn column_map(&self) -> Result<ColumnMap> {
        let covariates = self
            .covariates
            .iter()
            .map(|s| parse_covariate(s))
            .collect::<Result<Vec<_>>>()?;
        let map = ColumnMap {
            id: self.id.clone(),
            period: self.period.clone(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
            eligible: self.eligible.clone(),
            censored: (!self.censored.is_empty()).then(|| self.censored.clone()),
            covariates,
        };
        map.validate()?;
        Ok(map)
    }
}

fn parse_covariate(s: &str) -> Result<CovariateSpec> {
    let (name, kind) = match s.split_once(':') {
        Some((n, "binary")) => (n, CovariateKind::Binary),
        Some((n, "categorical")) => (n, CovariateKind::Categorical),
        Some((n, "continuous")) => (n, CovariateKind::Continuous),
        Some((_, k)) => return Err(Error::Parameter(format!("unknown covariate kind `{k}`"))),
        None => (s, CovariateKind::Continuous),
    };
    Ok(CovariateSpec {
        name: name.trim().to_string(),
        kind,
    })
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[arg(long = "estimand", visible_alias = "estimand_type", default_value = "ITT")]
    pub estimand: EstimandType,
    #[arg(long = "first-period", visible_alias = "first_period")]
    pub first_period: Option<i64>,
    #[arg(long = "last-period", visible_alias = "last_period")]
    pub last_period: Option<i64>,
    #[arg(long = "chunk-size", visible_alias = "chunk_size", default_value_t = 500)]
    pub chunk_size: usize,
    /// Write one `trial_<m>.csv` per trial instead of a single file.
    #[arg(long = "separate-files", visible_alias = "separate_files")]
    pub separate_files: bool,
    /// `assigned_treatment`, `dose`, or both (comma separated).
    #[arg(
        long = "model-var",
        visible_alias = "model_var",
        value_delimiter = ',',
        default_value = "assigned_treatment"
    )]
    pub model_var: Vec<ModelVar>,
    /// Variables snapshotted at trial baseline.
    #[arg(long = "outcome-cov", visible_alias = "outcome_cov", value_delimiter = ',')]
    pub outcome_cov: Vec<String>,
    #[arg(long = "where-var", visible_alias = "where_var", value_delimiter = ',')]
    pub where_var: Vec<String>,
    #[arg(long = "no-censor-weights", visible_alias = "no_censor_weights")]
    pub no_censor_weights: bool,
    #[arg(long = "cense-d-cov", visible_alias = "cense_d_cov", default_value = "1")]
    pub cense_d_cov: String,
    #[arg(long = "cense-n-cov", visible_alias = "cense_n_cov", default_value = "1")]
    pub cense_n_cov: String,
    #[arg(long = "switch-d-cov", visible_alias = "switch_d_cov", default_value = "1")]
    pub switch_d_cov: String,
    #[arg(long = "switch-n-cov", visible_alias = "switch_n_cov", default_value = "1")]
    pub switch_n_cov: String,
    /// `none`, `both` or `numerator`.
    #[arg(long = "pool-cense", visible_alias = "pool_cense", default_value = "none")]
    pub pool_cense: PoolCense,
    /// Use unstabilized weights (numerators set to 1).
    #[arg(long)]
    pub unstabilized: bool,
    #[arg(long = "eligible-wts-0", visible_alias = "eligible_wts_0")]
    pub eligible_wts_0: Option<String>,
    #[arg(long = "eligible-wts-1", visible_alias = "eligible_wts_1")]
    pub eligible_wts_1: Option<String>,
    /// `asis`, `p99`, `unweighted` or `limits:LO,HI`.
    #[arg(long, default_value = "asis")]
    pub truncation: Truncation,
    #[arg(long = "out-dir", visible_alias = "out_dir")]
    pub out_dir: PathBuf,
    /// Also write the equivalent run configuration to this file.
    #[arg(long = "save-config", visible_alias = "save_config")]
    pub save_config: Option<PathBuf>,
}

impl PrepareArgs {
    fn expansion(&self) -> ExpansionOptions {
        ExpansionOptions {
            first_period: self.first_period,
            last_period: self.last_period,
            chunk_size: self.chunk_size,
            separate_files: self.separate_files,
            model_var: self.model_var.clone(),
            outcome_covariates: self.outcome_cov.clone(),
            where_vars: self.where_var.clone(),
        }
    }

    fn weights(&self) -> WeightSpec {
        WeightSpec {
            use_censor_weights: !self.no_censor_weights,
            cense_d_cov: self.cense_d_cov.clone(),
            cense_n_cov: self.cense_n_cov.clone(),
            switch_d_cov: self.switch_d_cov.clone(),
            switch_n_cov: self.switch_n_cov.clone(),
            pool_cense: self.pool_cense,
            stabilized: !self.unstabilized,
            eligible_wts_0: self.eligible_wts_0.clone(),
            eligible_wts_1: self.eligible_wts_1.clone(),
            truncation: self.truncation,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ExpandedInput {
    /// Expanded data CSV, or a directory of per-trial files.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "estimand", visible_alias = "estimand_type", default_value = "ITT")]
    pub estimand: EstimandType,
    /// Columns to treat as categorical.
    #[arg(long, value_delimiter = ',')]
    pub categorical: Vec<String>,
    /// Columns carried for filtering only.
    #[arg(long = "where-var", visible_alias = "where_var", value_delimiter = ',')]
    pub where_var: Vec<String>,
}

impl ExpandedInput {
    fn read(&self, workdir: &Path) -> Result<crate::expansion::ExpandedDataset> {
        let kinds: Vec<CovariateSpec> = self
            .categorical
            .iter()
            .map(|n| CovariateSpec {
                name: n.clone(),
                kind: CovariateKind::Categorical,
            })
            .collect();
        let path = resolve(workdir, &self.input);
        if path.is_dir() {
            let manifest = scan_trial_dir(&path, self.estimand, &kinds, &self.where_var)?;
            return read_trial_files(&manifest);
        }
        read_expanded_csv(path, self.estimand, &kinds, &self.where_var)
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub data: ExpandedInput,
    #[arg(long = "p-control", visible_alias = "p_control")]
    pub p_control: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "subset-condition", visible_alias = "subset_condition")]
    pub subset_condition: Option<Predicate>,
    /// Keep input order instead of sorting by id, trial and follow-up.
    #[arg(long = "no-sort", visible_alias = "no_sort")]
    pub no_sort: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: ExpandedInput,
    #[arg(
        long = "model-var",
        visible_alias = "model_var",
        default_value = "assigned_treatment"
    )]
    pub model_var: String,
    #[arg(
        long = "include-trial-period",
        visible_alias = "include_trial_period",
        default_value = "trial_period + pow(trial_period,2)"
    )]
    pub trial_terms: String,
    #[arg(
        long = "include-followup-time",
        visible_alias = "include_followup_time",
        default_value = "followup_time + pow(followup_time,2)"
    )]
    pub followup_terms: String,
    #[arg(long = "outcome-cov", visible_alias = "outcome_cov", default_value = "")]
    pub outcome_cov: String,
    #[arg(long = "first-followup", visible_alias = "first_followup")]
    pub first_followup: Option<i64>,
    #[arg(long = "last-followup", visible_alias = "last_followup")]
    pub last_followup: Option<i64>,
    #[arg(long = "where-case", visible_alias = "where_case")]
    pub where_case: Option<Predicate>,
    #[arg(
        long = "analysis-weights",
        visible_alias = "analysis_weights",
        default_value = "asis"
    )]
    pub analysis_weights: Truncation,
    #[arg(long = "use-sample-weights", visible_alias = "use_sample_weights")]
    pub use_sample_weights: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl FitArgs {
    fn spec(&self) -> MsmSpec {
        MsmSpec {
            model_var: self.model_var.clone(),
            trial_terms: self.trial_terms.clone(),
            followup_terms: self.followup_terms.clone(),
            outcome_covariates: self.outcome_cov.clone(),
            first_followup: self.first_followup,
            last_followup: self.last_followup,
            where_case: self.where_case.clone(),
            analysis_weights: self.analysis_weights,
            use_sample_weights: self.use_sample_weights,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Fitted model written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// Baseline rows; rows with `followup_time != 0` are ignored.
    #[arg(long)]
    pub newdata: PathBuf,
    /// Keep only rows of this trial when the new data has `trial_period`.
    #[arg(long = "newdata-trial", visible_alias = "newdata_trial")]
    pub newdata_trial: Option<i64>,
    /// `A:B` for a range or a comma separated list.
    #[arg(long = "predict-times", visible_alias = "predict_times")]
    pub predict_times: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long = "no-conf-int", visible_alias = "no_conf_int")]
    pub no_conf_int: bool,
    /// `cum_inc` or `survival`.
    #[arg(long = "type", default_value = "cum_inc")]
    pub kind: PredictionType,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Recompute every stage even when cached outputs match.
    #[arg(long)]
    pub force: bool,
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn parse_times(s: &str) -> Result<Vec<i64>> {
    let bad = || Error::Parameter(format!("cannot parse predict times `{s}`"));
    if let Some((a, b)) = s.split_once(':') {
        let a: i64 = a.trim().parse().map_err(|_| bad())?;
        let b: i64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn print_table(rows: &[CoefficientRow]) {
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    println!(
        "{:<28} {:>10} {:>10} {:>10} {:>10} {:>8} {:>10}",
        "term", "estimate", "robust_se", "2.5%", "97.5%", "z", "p"
    );
    for r in rows {
        println!(
            "{:<28} {:>10} {:>10} {:>10} {:>10} {:>8} {:>10}",
            r.name,
            f(r.estimate),
            f(r.std_error),
            f(r.lower),
            f(r.upper),
            r.z.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}")),
            r.p_value.map_or_else(|| "NA".to_string(), |x| format!("{x:.3e}")),
        );
    }
}

/// Outcome of a command: whether every fitted model converged.
struct Outcome {
    converged: bool,
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let workdir = cli.workdir.clone().unwrap_or_else(|| PathBuf::from("."));
    let ok = Outcome { converged: true };
    match &cli.command {
        Command::Simulate(a) => {
            let mut cfg = SimConfig {
                n: a.n,
                max_visit: a.max_visit,
                seed: a.seed,
                censoring: !a.no_censoring,
                confounding: !a.no_confounding,
                ..Default::default()
            };
            if let Some(p) = &a.coefficients {
                let p = resolve(&workdir, p);
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                cfg.coefficients = serde_json::from_str(&text)?;
            }
            let ds = simulate_dataset(&cfg)?;
            write_longitudinal_csv(&ds, resolve(&workdir, &a.out))?;
            log::info!("simulated {} records for {} individuals", ds.len(), ds.n_individuals());
            Ok(ok)
        }
        Command::Prepare(a) => {
            let columns = a.columns.column_map()?;
            let expansion = a.expansion();
            let weights = a.weights();
            expansion.validate()?;
            weights.validate(a.estimand)?;
            if let Some(path) = &a.save_config {
                let cfg = RunConfig {
                    input: a.input.clone(),
                    columns: columns.clone(),
                    estimand: a.estimand,
                    expansion: expansion.clone(),
                    weights: weights.clone(),
                    msm: MsmSpec::default(),
                    sampling: None,
                    prediction: None,
                    output_dir: a.out_dir.clone(),
                };
                cfg.write(resolve(&workdir, path))?;
            }
            let out = resolve(&workdir, &a.out_dir);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let ds = derive_time_on_regime(&load_longitudinal_csv(resolve(&workdir, &a.input), &columns)?);
            let models = fit_weight_models(&ds, &weights, a.estimand)?;
            models.write_json(out.join("weight_models.json"))?;
            let converged = models.all().all(|m| m.fit.converged);
            let ratios = compute_period_ratios(&ds, &models, &weights, a.estimand)?;
            if a.separate_files {
                let mut sink = WeightingSink {
                    inner: TrialFileSink::new(&out, a.estimand)?,
                    ratios: &ratios,
                    estimand: a.estimand,
                };
                let manifest = expand_chunked(&ds, a.estimand, &expansion, &mut sink)?;
                if weights.truncation != Truncation::Asis {
                    log::warn!("truncation is not applied to per-trial files; apply it when fitting");
                }
                log::info!(
                    "wrote {} rows into {} trial files",
                    manifest.total_rows(),
                    manifest.files.len()
                );
            } else {
                let data = attach_weights(expand(&ds, a.estimand, &expansion)?, &ratios)?;
                let data = truncate_weights(data, weights.truncation);
                write_expanded_csv(&data, out.join("expanded.csv"))?;
                log::info!("wrote {} expanded rows", data.len());
            }
            Ok(Outcome { converged })
        }
        Command::Sample(a) => {
            let data = a.data.read(&workdir)?;
            let opts = SamplingOptions {
                p_control: a.p_control,
                seed: a.seed,
                subset_condition: a.subset_condition.clone(),
                sort: !a.no_sort,
            };
            let s = case_control_sample(&data, &opts)?;
            write_expanded_csv(&s, resolve(&workdir, &a.out))?;
            log::info!("kept {} of {} rows", s.len(), data.len());
            Ok(ok)
        }
        Command::Fit(a) => {
            let data = a.data.read(&workdir)?;
            let fit = fit_msm(&data, &a.spec())?;
            fit.write_json(resolve(&workdir, &a.out))?;
            if !cli.quiet {
                print_table(&summarize_msm(&fit));
            }
            Ok(Outcome {
                converged: fit.glm.converged,
            })
        }
        Command::Predict(a) => {
            let fit = MsmFit::read_json(resolve(&workdir, &a.model))?;
            let mut newdata = NewData::read_csv(resolve(&workdir, &a.newdata))?;
            if let Some(m) = a.newdata_trial {
                if let Some(col) = newdata.frame().get("trial_period") {
                    let mask: Vec<bool> = col.iter().map(|&v| v == m as f64).collect();
                    newdata = NewData::from_frame(newdata.frame().filter(&mask));
                }
            }
            let cfg = PredictionConfig {
                newdata: Some(a.newdata.clone()),
                newdata_trial: a.newdata_trial.unwrap_or(0),
                options: PredictOptions {
                    predict_times: a.predict_times.as_deref().map(parse_times).transpose()?,
                    samples: a.samples,
                    conf_int: !a.no_conf_int,
                    kind: a.kind,
                    seed: a.seed,
                },
            };
            let p = marginal_effect(&fit, &newdata, &cfg.options)?;
            p.write_csv(resolve(&workdir, &a.out))?;
            Ok(ok)
        }
        Command::Run(a) => {
            let cfg = RunConfig::read(resolve(&workdir, &a.config))?;
            let record = run_pipeline(&cfg, &workdir, a.force)?;
            if !cli.quiet {
                print_table(&record.msm_summary);
            }
            let converged = record.msm_converged.unwrap_or(true) && record.weight_models.iter().all(|m| m.converged);
            Ok(Outcome { converged })
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    match execute(&cli) {
        Ok(o) if !o.converged && cli.strict => {
            log::error!("a model fit did not converge");
            2
        }
        Ok(_) => 0,
        Err(e) => {
            log::error!("{e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}
