//! End-to-end runs: weights, expansion, optional sampling, outcome model and
//! optional prediction, driven by one JSON configuration.
//!
//! Each stage is keyed by a hash of its configuration and of the previous
//! stage's key. When the output directory already holds a record whose stage
//! key matches and whose files are intact, the stage output is reloaded
//! instead of recomputed.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_longitudinal_csv, ColumnMap};
use crate::error::{Error, Result};
use crate::expansion::{
    derive_time_on_regime, expand, expand_chunked, read_expanded_csv, read_trial_files, write_expanded_csv,
    EstimandType, ExpandedDataset, ExpansionOptions, TrialFileSink, TIME_ON_REGIME,
};
use crate::glm::CoefficientRow;
use crate::msm::{fit_msm, summarize_msm, MsmFit, MsmSpec};
use crate::predict::{marginal_effect, NewData, PredictOptions};
use crate::sampling::{case_control_sample, SamplingOptions};
use crate::weights::{
    attach_weights, compute_period_ratios, fit_weight_models, truncate_weights, WeightModelSummary, WeightSpec,
    WeightingSink,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionConfig {
    /// Baseline rows to average over. Without a file, the baseline rows of
    /// trial `newdata_trial` in the expanded data are used.
    pub newdata: Option<PathBuf>,
    pub newdata_trial: i64,
    #[serde(flatten)]
    pub options: PredictOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    #[serde(default = "ColumnMap::simulated")]
    pub columns: ColumnMap,
    pub estimand: EstimandType,
    #[serde(default)]
    pub expansion: ExpansionOptions,
    #[serde(default)]
    pub weights: WeightSpec,
    #[serde(default)]
    pub msm: MsmSpec,
    #[serde(default)]
    pub sampling: Option<SamplingOptions>,
    #[serde(default)]
    pub prediction: Option<PredictionConfig>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut s = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut s))
            .map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    /// Checks every option block and their combinations.
    pub fn validate(&self) -> Result<()> {
        self.columns.validate()?;
        self.expansion.validate()?;
        self.weights.validate(self.estimand)?;
        self.msm.validate(self.estimand)?;
        if self.weights.use_censor_weights && self.columns.censored.is_none() {
            return Err(Error::Parameter(
                "use_censor_weights needs a censored column in the column map".into(),
            ));
        }
        if let Some(s) = &self.sampling {
            s.validate()?;
            if !self.msm.use_sample_weights {
                log::warn!("case-control sampling is enabled but msm.use_sample_weights is false");
            }
        } else if self.msm.use_sample_weights {
            return Err(Error::Parameter(
                "msm.use_sample_weights requires a sampling block".into(),
            ));
        }
        if self.prediction.is_some() && self.estimand == EstimandType::AsTreated {
            return Err(Error::Parameter(
                "prediction is not available for the as-treated estimand".into(),
            ));
        }
        Ok(())
    }

    /// Expansion options with every covariate and filter variable the outcome
    /// model needs added to the carried columns.
    pub fn resolved_expansion(&self) -> Result<ExpansionOptions> {
        let mut opts = self.expansion.clone();
        let structural: BTreeSet<&str> = [
            "trial_period",
            "followup_time",
            "assigned_treatment",
            "treatment",
            "dose",
            "outcome",
            "weight",
            "id",
        ]
        .into();
        let covariates: BTreeSet<&str> = self.columns.covariates.iter().map(|c| c.name.as_str()).collect();
        for v in self.msm.formula()?.variables() {
            if !structural.contains(v.as_str())
                && !opts.outcome_covariates.contains(&v)
                && (covariates.contains(v.as_str()) || v == TIME_ON_REGIME)
            {
                opts.outcome_covariates.push(v);
            }
        }
        let filters = self
            .msm
            .where_case
            .iter()
            .chain(self.sampling.as_ref().and_then(|s| s.subset_condition.as_ref()));
        for p in filters {
            for v in p.variables() {
                let v = v.to_string();
                if !structural.contains(v.as_str())
                    && !opts.outcome_covariates.contains(&v)
                    && !opts.where_vars.contains(&v)
                {
                    opts.where_vars.push(v);
                }
            }
        }
        Ok(opts)
    }

    fn resolve(&self, workdir: &Path) -> RunConfig {
        let abs = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                workdir.join(p)
            }
        };
        let mut c = self.clone();
        c.input = abs(&self.input);
        c.output_dir = abs(&self.output_dir);
        if let Some(p) = c.prediction.as_mut() {
            p.newdata = p.newdata.as_deref().map(abs);
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub reused: bool,
    pub seconds: f64,
    pub outputs: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
    pub input_sha256: String,
    pub sampling_seed: Option<u64>,
    pub prediction_seed: Option<u64>,
    pub stages: Vec<StageRecord>,
    pub weight_models: Vec<WeightModelSummary>,
    pub msm_summary: Vec<CoefficientRow>,
    pub msm_converged: Option<bool>,
    /// Set when a stage failed; outputs of the listed stages are complete.
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }
}

pub const RECORD_FILE: &str = "run_record.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn stage_key(prev: &str, name: &str, parts: &impl Serialize) -> Result<String> {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(name.as_bytes());
    h.update(serde_json::to_vec(parts)?);
    Ok(hex::encode(h.finalize()))
}

fn file_entry(dir: &Path, rel: &Path) -> Result<FileEntry> {
    let full = dir.join(rel);
    let bytes = std::fs::metadata(&full).map_err(|e| Error::io(&full, e))?.len();
    Ok(FileEntry {
        path: rel.to_path_buf(),
        bytes,
        sha256: sha256_file(&full)?,
    })
}

fn intact(dir: &Path, stage: &StageRecord) -> bool {
    stage
        .outputs
        .iter()
        .all(|f| sha256_file(&dir.join(&f.path)).is_ok_and(|h| h == f.sha256))
}

struct Runner<'a> {
    out: &'a Path,
    previous: Option<RunRecord>,
    record: RunRecord,
    force: bool,
}

impl Runner<'_> {
    /// A matching, intact stage from the previous run.
    fn reusable(&self, name: &str, key: &str) -> Option<StageRecord> {
        if self.force {
            return None;
        }
        let prev = self.previous.as_ref()?.stage(name)?;
        (prev.key == key && intact(self.out, prev)).then(|| prev.clone())
    }

    fn finish_stage(&mut self, name: &str, key: String, started: Instant, outputs: &[PathBuf]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| file_entry(self.out, p))
            .collect::<Result<Vec<_>>>()?;
        self.record.stages.push(StageRecord {
            name: name.into(),
            key,
            reused: false,
            seconds: started.elapsed().as_secs_f64(),
            outputs,
        });
        Ok(())
    }

    fn reuse(&mut self, mut stage: StageRecord) {
        log::info!("reusing stage {}", stage.name);
        stage.reused = true;
        stage.seconds = 0.0;
        self.record.stages.push(stage);
    }
}

/// Runs every configured stage, writing artifacts and `run_record.json` into
/// the output directory. Relative paths are resolved against `workdir`.
pub fn run_pipeline(config: &RunConfig, workdir: &Path, force: bool) -> Result<RunRecord> {
    config.validate()?;
    let cfg = config.resolve(workdir);
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let input = sha256_file(&cfg.input).map_err(|e| e.in_stage("load"));
    let input_sha256 = input.as_ref().map(String::clone).unwrap_or_default();
    let previous = RunRecord::read(out.join(RECORD_FILE)).ok();
    let mut runner = Runner {
        out: &out,
        previous,
        force,
        record: RunRecord {
            version: VERSION.into(),
            config: config.clone(),
            input_sha256: input_sha256.clone(),
            sampling_seed: cfg.sampling.as_ref().map(|s| s.seed),
            prediction_seed: cfg.prediction.as_ref().map(|p| p.options.seed),
            stages: vec![],
            weight_models: vec![],
            msm_summary: vec![],
            msm_converged: None,
            failed_stage: None,
            error: None,
        },
    };
    let result = input.and_then(|sha| run_stages(&cfg, &mut runner, &sha));
    let record_path = out.join(RECORD_FILE);
    match result {
        Ok(()) => {
            runner.record.write(&record_path)?;
            Ok(runner.record)
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.to_string(),
                _ => "unknown".into(),
            };
            runner.record.failed_stage = Some(stage);
            runner.record.error = Some(e.to_string());
            runner.record.write(&record_path)?;
            Err(e)
        }
    }
}

fn run_stages(cfg: &RunConfig, runner: &mut Runner, input_sha256: &str) -> Result<()> {
    let out = runner.out.to_path_buf();
    let estimand = cfg.estimand;
    let expansion = cfg.resolved_expansion().map_err(|e| e.in_stage("prepare"))?;

    // Weights and expansion.
    let key = stage_key(
        input_sha256,
        "prepare",
        &(&cfg.columns, estimand, &expansion, &cfg.weights),
    )?;
    let expanded_rel = PathBuf::from("expanded.csv");
    let models_rel = PathBuf::from("weight_models.json");
    let kinds = cfg.columns.covariates.clone();
    let mut data = match runner.reusable("prepare", &key) {
        Some(stage) => {
            runner.reuse(stage);
            let d = read_expanded_csv(out.join(&expanded_rel), estimand, &kinds, &expansion.where_vars)
                .map_err(|e| e.in_stage("prepare"))?;
            if let Ok(models) = std::fs::read(out.join(&models_rel)) {
                runner.record.weight_models = serde_json::from_slice(&models).unwrap_or_default();
            }
            d
        }
        None => {
            let started = Instant::now();
            let d = prepare(cfg, &expansion, &out).map_err(|e| e.in_stage("prepare"))?;
            let (data, models, mut files) = d;
            models
                .write_json(out.join(&models_rel))
                .map_err(|e| e.in_stage("prepare"))?;
            write_expanded_csv(&data, out.join(&expanded_rel)).map_err(|e| e.in_stage("prepare"))?;
            runner.record.weight_models = models.summaries();
            files.push(models_rel.clone());
            files.push(expanded_rel.clone());
            runner.finish_stage("prepare", key.clone(), started, &files)?;
            data
        }
    };
    let newdata_source = data.clone();
    let mut key = key;

    if let Some(sampling) = &cfg.sampling {
        let skey = stage_key(&key, "sample", sampling)?;
        let rel = PathBuf::from("sampled.csv");
        data = match runner.reusable("sample", &skey) {
            Some(stage) => {
                runner.reuse(stage);
                read_expanded_csv(out.join(&rel), estimand, &kinds, &expansion.where_vars)
                    .map_err(|e| e.in_stage("sample"))?
            }
            None => {
                let started = Instant::now();
                let s = case_control_sample(&data, sampling).map_err(|e| e.in_stage("sample"))?;
                write_expanded_csv(&s, out.join(&rel)).map_err(|e| e.in_stage("sample"))?;
                runner.finish_stage("sample", skey.clone(), started, &[rel])?;
                s
            }
        };
        key = skey;
    }

    let fkey = stage_key(&key, "fit", &cfg.msm)?;
    let rel = PathBuf::from("msm.json");
    let fit = match runner.reusable("fit", &fkey) {
        Some(stage) => {
            runner.reuse(stage);
            MsmFit::read_json(out.join(&rel)).map_err(|e| e.in_stage("fit"))?
        }
        None => {
            let started = Instant::now();
            let fit = fit_msm(&data, &cfg.msm).map_err(|e| e.in_stage("fit"))?;
            fit.write_json(out.join(&rel)).map_err(|e| e.in_stage("fit"))?;
            runner.finish_stage("fit", fkey.clone(), started, &[rel])?;
            fit
        }
    };
    runner.record.msm_summary = summarize_msm(&fit);
    runner.record.msm_converged = Some(fit.glm.converged);
    if !fit.glm.converged {
        log::warn!("outcome model did not converge");
    }

    if let Some(pred) = &cfg.prediction {
        let newdata_sha = match &pred.newdata {
            Some(p) => Some(sha256_file(p).map_err(|e| e.in_stage("predict"))?),
            None => None,
        };
        let pkey = stage_key(&fkey, "predict", &(pred, newdata_sha))?;
        let rel = PathBuf::from("prediction.csv");
        match runner.reusable("predict", &pkey) {
            Some(stage) => runner.reuse(stage),
            None => {
                let started = Instant::now();
                let newdata = match &pred.newdata {
                    Some(p) => NewData::read_csv(p),
                    None => NewData::from_expanded(&newdata_source, |r| r.trial_period == pred.newdata_trial),
                }
                .map_err(|e| e.in_stage("predict"))?;
                let p = marginal_effect(&fit, &newdata, &pred.options).map_err(|e| e.in_stage("predict"))?;
                p.write_csv(out.join(&rel)).map_err(|e| e.in_stage("predict"))?;
                runner.finish_stage("predict", pkey, started, &[rel])?;
            }
        }
    }
    Ok(())
}

type Prepared = (ExpandedDataset, crate::weights::WeightModelSet, Vec<PathBuf>);

fn prepare(cfg: &RunConfig, expansion: &ExpansionOptions, out: &Path) -> Result<Prepared> {
    let ds = load_longitudinal_csv(&cfg.input, &cfg.columns)?;
    let ds = derive_time_on_regime(&ds);
    warn_unadjusted_numerators(cfg);
    let models = fit_weight_models(&ds, &cfg.weights, cfg.estimand)?;
    let ratios = compute_period_ratios(&ds, &models, &cfg.weights, cfg.estimand)?;
    let mut files = Vec::new();
    let data = if expansion.separate_files {
        let dir = out.join("trials");
        let sink = TrialFileSink::new(&dir, cfg.estimand)?;
        let mut sink = WeightingSink {
            inner: sink,
            ratios: &ratios,
            estimand: cfg.estimand,
        };
        let manifest = expand_chunked(&ds, cfg.estimand, expansion, &mut sink)?;
        for f in &manifest.files {
            files.push(Path::new("trials").join(f.path.file_name().expect("trial file name")));
        }
        read_trial_files(&manifest)?
    } else {
        attach_weights(expand(&ds, cfg.estimand, expansion)?, &ratios)?
    };
    Ok((truncate_weights(data, cfg.weights.truncation), models, files))
}

/// Stabilized weights are only valid when numerator covariates are adjusted
/// for in the outcome model.
fn warn_unadjusted_numerators(cfg: &RunConfig) {
    if !cfg.weights.stabilized {
        return;
    }
    let Ok(msm) = cfg.msm.formula() else { return };
    let adjusted = msm.variables();
    let mut sources = vec![&cfg.weights.cense_n_cov];
    if cfg.estimand.uses_switch_weights() {
        sources.push(&cfg.weights.switch_n_cov);
    }
    for src in sources {
        let Ok(f) = crate::design::ModelFormula::parse(src) else {
            continue;
        };
        for v in f.variables() {
            if v != TIME_ON_REGIME && v != cfg.columns.period && !adjusted.contains(&v) {
                log::warn!("numerator covariate `{v}` is not in the outcome model; stabilized weights may be biased");
            }
        }
    }
}
