//! Expansion of person-period data into the sequence-of-trials layout.
//!
//! Every eligible period `m` of an individual opens trial `m`. Follow-up time
//! `k` is measured on the global period clock, so the row for original period
//! `t` has `followup_time = t - m`. Outcome-event and censored periods are
//! emitted as the terminal row of a trial. Under the per-protocol estimand the
//! first period whose treatment differs from the baseline treatment ends the
//! trial and is itself not emitted.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{parse_float, CovariateKind, CovariateSpec, LongitudinalDataset, LongitudinalRecord};
use crate::error::{Error, Result};

pub const TIME_ON_REGIME: &str = "time_on_regime";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimandType {
    #[serde(rename = "ITT")]
    Itt,
    #[serde(rename = "PP")]
    Pp,
    #[serde(rename = "As-Treated", alias = "AsTreated")]
    AsTreated,
}

impl EstimandType {
    /// Whether treatment-switch weights enter the analysis weights.
    pub fn uses_switch_weights(self) -> bool {
        !matches!(self, EstimandType::Itt)
    }
}

impl fmt::Display for EstimandType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimandType::Itt => "ITT",
            EstimandType::Pp => "PP",
            EstimandType::AsTreated => "As-Treated",
        })
    }
}

impl FromStr for EstimandType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ITT" | "itt" => Ok(EstimandType::Itt),
            "PP" | "pp" => Ok(EstimandType::Pp),
            "As-Treated" | "AsTreated" | "as-treated" | "as_treated" => Ok(EstimandType::AsTreated),
            other => Err(Error::Parameter(format!("unknown estimand `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVar {
    AssignedTreatment,
    Dose,
}

impl FromStr for ModelVar {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assigned_treatment" => Ok(ModelVar::AssignedTreatment),
            "dose" => Ok(ModelVar::Dose),
            other => Err(Error::Parameter(format!("unknown model_var `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionOptions {
    pub first_period: Option<i64>,
    pub last_period: Option<i64>,
    pub chunk_size: usize,
    pub separate_files: bool,
    pub model_var: Vec<ModelVar>,
    /// Variables snapshotted at each trial baseline.
    pub outcome_covariates: Vec<String>,
    /// Extra variables carried through for subgroup selection.
    pub where_vars: Vec<String>,
}

impl Default for ExpansionOptions {
    fn default() -> Self {
        ExpansionOptions {
            first_period: None,
            last_period: None,
            chunk_size: 500,
            separate_files: false,
            model_var: vec![ModelVar::AssignedTreatment],
            outcome_covariates: Vec::new(),
            where_vars: Vec::new(),
        }
    }
}

impl ExpansionOptions {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size < 1 {
            return Err(Error::Parameter("chunk_size must be at least 1".into()));
        }
        if let (Some(a), Some(b)) = (self.first_period, self.last_period) {
            if a > b {
                return Err(Error::Parameter(format!("first_period {a} exceeds last_period {b}")));
            }
        }
        Ok(())
    }

    fn model_vars(&self) -> Vec<ModelVar> {
        if self.model_var.is_empty() {
            vec![ModelVar::AssignedTreatment]
        } else {
            self.model_var.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpandedRow {
    pub id: i64,
    pub trial_period: i64,
    pub followup_time: i64,
    pub outcome: u8,
    pub weight: f64,
    pub treatment: u8,
    pub assigned_treatment: u8,
    /// Treatments received over periods `m..=m+k`, baseline included.
    pub dose: u32,
    /// Baseline values, aligned with `ExpandedSchema::covariates`.
    pub covariates: Vec<f64>,
    /// Baseline values, aligned with `ExpandedSchema::where_vars`.
    pub where_values: Vec<f64>,
    pub sample_weight: Option<f64>,
}

impl ExpandedRow {
    /// Original period this row was taken from.
    pub fn period(&self) -> i64 {
        self.trial_period + self.followup_time
    }

    pub fn sort_key(&self) -> (i64, i64, i64) {
        (self.id, self.trial_period, self.followup_time)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedSchema {
    pub covariates: Vec<CovariateSpec>,
    pub where_vars: Vec<String>,
    pub include_assigned_treatment: bool,
    pub include_dose: bool,
    pub has_sample_weight: bool,
}

impl ExpandedSchema {
    /// Column names in file order.
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["id", "trial_period", "followup_time", "outcome", "weight", "treatment"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.include_assigned_treatment {
            h.push("assigned_treatment".into());
        }
        if self.include_dose {
            h.push("dose".into());
        }
        h.extend(self.covariates.iter().map(|c| c.name.clone()));
        h.extend(self.where_vars.iter().cloned());
        if self.has_sample_weight {
            h.push("sample_weight".into());
        }
        h
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    pub fn where_index(&self, name: &str) -> Option<usize> {
        self.where_vars.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone)]
pub struct ExpandedDataset {
    pub rows: Vec<ExpandedRow>,
    pub schema: ExpandedSchema,
    pub estimand: EstimandType,
}

impl ExpandedDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorts rows by `(id, trial_period, followup_time)`.
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| r.sort_key());
    }

    /// Looks up a named value of a row: structural columns, covariates, where vars.
    pub fn value(&self, row: &ExpandedRow, name: &str) -> Option<f64> {
        match name {
            "id" => Some(row.id as f64),
            "trial_period" => Some(row.trial_period as f64),
            "followup_time" => Some(row.followup_time as f64),
            "outcome" => Some(row.outcome as f64),
            "weight" => Some(row.weight),
            "treatment" => Some(row.treatment as f64),
            "assigned_treatment" => Some(row.assigned_treatment as f64),
            "dose" => Some(row.dose as f64),
            "sample_weight" => row.sample_weight,
            _ => self
                .schema
                .covariate_index(name)
                .map(|i| row.covariates[i])
                .or_else(|| self.schema.where_index(name).map(|i| row.where_values[i])),
        }
    }

    pub fn trial_periods(&self) -> Vec<i64> {
        let mut t: Vec<i64> = self.rows.iter().map(|r| r.trial_period).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Number of consecutive records the current treatment value has been held.
pub fn derive_time_on_regime(ds: &LongitudinalDataset) -> LongitudinalDataset {
    let mut out = ds.clone();
    let groups = out.group_ranges().to_vec();
    let recs = out.records_mut();
    for g in groups {
        let mut prev: Option<(u8, u32)> = None;
        for r in &mut recs[g] {
            let tor = match prev {
                Some((a, n)) if a == r.treatment => n + 1,
                _ => 0,
            };
            r.time_on_regime = Some(tor);
            prev = Some((r.treatment, tor));
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
enum VarSource {
    Covariate(usize),
    TimeOnRegime,
}

fn resolve(ds: &LongitudinalDataset, name: &str) -> Result<VarSource> {
    if let Some(i) = ds.covariate_index(name) {
        return Ok(VarSource::Covariate(i));
    }
    if name == TIME_ON_REGIME {
        return Ok(VarSource::TimeOnRegime);
    }
    Err(Error::Schema(format!("unknown covariate `{name}`")))
}

fn read_var(r: &LongitudinalRecord, src: VarSource) -> Result<f64> {
    match src {
        VarSource::Covariate(i) => Ok(r.covariates[i]),
        VarSource::TimeOnRegime => r
            .time_on_regime
            .map(f64::from)
            .ok_or_else(|| Error::Integrity("time_on_regime has not been derived".into())),
    }
}

struct Plan {
    estimand: EstimandType,
    first: i64,
    last: i64,
    cov_src: Vec<VarSource>,
    where_src: Vec<VarSource>,
    schema: ExpandedSchema,
}

fn plan(ds: &LongitudinalDataset, estimand: EstimandType, opts: &ExpansionOptions) -> Result<Plan> {
    opts.validate()?;
    let model_vars = opts.model_vars();
    let mut covariates = Vec::new();
    let mut cov_src = Vec::new();
    for name in &opts.outcome_covariates {
        if covariates.iter().any(|c: &CovariateSpec| &c.name == name) {
            continue;
        }
        let src = resolve(ds, name)?;
        let kind = match src {
            VarSource::Covariate(i) => ds.column_map().covariates[i].kind,
            VarSource::TimeOnRegime => CovariateKind::Continuous,
        };
        covariates.push(CovariateSpec {
            name: name.clone(),
            kind,
        });
        cov_src.push(src);
    }
    let mut where_vars = Vec::new();
    let mut where_src = Vec::new();
    for name in &opts.where_vars {
        if covariates.iter().any(|c| &c.name == name) || where_vars.contains(name) {
            continue;
        }
        where_src.push(resolve(ds, name)?);
        where_vars.push(name.clone());
    }
    Ok(Plan {
        estimand,
        first: opts.first_period.unwrap_or(i64::MIN),
        last: opts.last_period.unwrap_or(i64::MAX),
        cov_src,
        where_src,
        schema: ExpandedSchema {
            covariates,
            where_vars,
            include_assigned_treatment: model_vars.contains(&ModelVar::AssignedTreatment),
            include_dose: model_vars.contains(&ModelVar::Dose),
            has_sample_weight: false,
        },
    })
}

fn expand_individual(recs: &[LongitudinalRecord], plan: &Plan, out: &mut Vec<ExpandedRow>) -> Result<()> {
    for (b, base) in recs.iter().enumerate() {
        if base.eligible != 1 || base.period < plan.first || base.period > plan.last {
            continue;
        }
        let m = base.period;
        let assigned = base.treatment;
        let covariates = plan
            .cov_src
            .iter()
            .map(|&s| read_var(base, s))
            .collect::<Result<Vec<_>>>()?;
        let where_values = plan
            .where_src
            .iter()
            .map(|&s| read_var(base, s))
            .collect::<Result<Vec<_>>>()?;
        let mut dose = 0u32;
        for r in &recs[b..] {
            if plan.estimand == EstimandType::Pp && r.treatment != assigned {
                break;
            }
            dose += r.treatment as u32;
            out.push(ExpandedRow {
                id: r.id,
                trial_period: m,
                followup_time: r.period - m,
                outcome: r.outcome,
                weight: 1.0,
                treatment: r.treatment,
                assigned_treatment: assigned,
                // only kept when it is an output column, so rows survive a CSV round trip
                dose: if plan.schema.include_dose { dose } else { 0 },
                covariates: covariates.clone(),
                where_values: where_values.clone(),
                sample_weight: None,
            });
            if r.outcome == 1 || r.censored == 1 {
                break;
            }
        }
    }
    Ok(())
}

/// Expands every eligible period of every individual into trial rows.
pub fn expand(ds: &LongitudinalDataset, estimand: EstimandType, opts: &ExpansionOptions) -> Result<ExpandedDataset> {
    let plan = plan(ds, estimand, opts)?;
    let mut rows = Vec::new();
    for recs in ds.individuals() {
        expand_individual(recs, &plan, &mut rows)?;
    }
    Ok(ExpandedDataset {
        rows,
        schema: plan.schema,
        estimand,
    })
}

/// Receives expanded rows chunk by chunk. Each chunk holds complete individuals.
pub trait RowSink {
    fn write_chunk(&mut self, rows: &mut Vec<ExpandedRow>, schema: &ExpandedSchema) -> Result<()>;
    fn finish(&mut self) -> Result<TrialManifest>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFile {
    pub trial_period: i64,
    pub path: PathBuf,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialManifest {
    pub dir: PathBuf,
    pub files: Vec<TrialFile>,
    pub schema: ExpandedSchema,
    pub estimand: EstimandType,
}

impl TrialManifest {
    pub fn total_rows(&self) -> usize {
        self.files.iter().map(|f| f.rows).sum()
    }
}

/// Appends rows to `trial_<m>.csv` files in a directory.
pub struct TrialFileSink {
    dir: PathBuf,
    estimand: EstimandType,
    writers: BTreeMap<i64, (PathBuf, csv::Writer<BufWriter<File>>, usize)>,
    schema: Option<ExpandedSchema>,
}

impl TrialFileSink {
    /// Creates the directory if needed and checks that it is writable.
    /// Existing `trial_*.csv` files in it are replaced.
    pub fn new(dir: impl Into<PathBuf>, estimand: EstimandType) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let probe = dir.join(".write_probe");
        File::create(&probe).map_err(|e| Error::io(&dir, e))?;
        let _ = std::fs::remove_file(&probe);
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if trial_period_of(&path).is_some() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(TrialFileSink {
            dir,
            estimand,
            writers: BTreeMap::new(),
            schema: None,
        })
    }
}

fn trial_period_of(path: &Path) -> Option<i64> {
    let name = path.file_name()?.to_str()?;
    name.strip_prefix("trial_")?.strip_suffix(".csv")?.parse().ok()
}

impl RowSink for TrialFileSink {
    fn write_chunk(&mut self, rows: &mut Vec<ExpandedRow>, schema: &ExpandedSchema) -> Result<()> {
        if self.schema.is_none() {
            self.schema = Some(schema.clone());
        }
        let mut by_trial: BTreeMap<i64, Vec<&ExpandedRow>> = BTreeMap::new();
        for r in rows.iter() {
            by_trial.entry(r.trial_period).or_default().push(r);
        }
        // Open every file this chunk needs before writing any row.
        for &m in by_trial.keys() {
            if !self.writers.contains_key(&m) {
                let path = self.dir.join(format!("trial_{m}.csv"));
                let file = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                let mut w = csv::Writer::from_writer(BufWriter::new(file));
                w.write_record(schema.header())?;
                self.writers.insert(m, (path, w, 0));
            }
        }
        let mut fields = Vec::new();
        for (m, trial_rows) in by_trial {
            let (_, w, count) = self.writers.get_mut(&m).expect("opened above");
            for r in trial_rows {
                row_fields(r, schema, &mut fields);
                w.write_record(&fields)?;
                *count += 1;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<TrialManifest> {
        let mut files = Vec::new();
        for (m, (path, w, count)) in std::mem::take(&mut self.writers) {
            let mut w = w;
            w.flush().map_err(|e| Error::io(&path, e))?;
            files.push(TrialFile {
                trial_period: m,
                path,
                rows: count,
            });
        }
        Ok(TrialManifest {
            dir: self.dir.clone(),
            files,
            schema: self.schema.clone().unwrap_or(ExpandedSchema {
                covariates: vec![],
                where_vars: vec![],
                include_assigned_treatment: true,
                include_dose: false,
                has_sample_weight: false,
            }),
            estimand: self.estimand,
        })
    }
}

/// Streams the expansion through `sink`, `chunk_size` individuals at a time.
pub fn expand_chunked(
    ds: &LongitudinalDataset,
    estimand: EstimandType,
    opts: &ExpansionOptions,
    sink: &mut dyn RowSink,
) -> Result<TrialManifest> {
    if !opts.separate_files {
        return Err(Error::Parameter(
            "chunked expansion requires separate_files = true".into(),
        ));
    }
    let plan = plan(ds, estimand, opts)?;
    let groups: Vec<&[LongitudinalRecord]> = ds.individuals().collect();
    for chunk in groups.chunks(opts.chunk_size) {
        let parts = chunk
            .par_iter()
            .map(|recs| {
                let mut rows = Vec::new();
                expand_individual(recs, &plan, &mut rows).map(|_| rows)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows: Vec<ExpandedRow> = parts.into_iter().flatten().collect();
        sink.write_chunk(&mut rows, &plan.schema)?;
    }
    let mut manifest = sink.finish()?;
    manifest.schema = plan.schema;
    manifest.estimand = estimand;
    Ok(manifest)
}

fn row_fields(r: &ExpandedRow, schema: &ExpandedSchema, out: &mut Vec<String>) {
    out.clear();
    out.push(r.id.to_string());
    out.push(r.trial_period.to_string());
    out.push(r.followup_time.to_string());
    out.push(r.outcome.to_string());
    out.push(r.weight.to_string());
    out.push(r.treatment.to_string());
    if schema.include_assigned_treatment {
        out.push(r.assigned_treatment.to_string());
    }
    if schema.include_dose {
        out.push(r.dose.to_string());
    }
    out.extend(r.covariates.iter().map(|v| v.to_string()));
    out.extend(r.where_values.iter().map(|v| v.to_string()));
    if schema.has_sample_weight {
        out.push(r.sample_weight.unwrap_or(1.0).to_string());
    }
}

/// Writes the expanded data as one CSV file.
pub fn write_expanded_csv(data: &ExpandedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(data.schema.header())?;
    let mut fields = Vec::new();
    for r in &data.rows {
        row_fields(r, &data.schema, &mut fields);
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads an expanded CSV. Columns after the structural ones are covariates,
/// except the trailing `sample_weight` and any named in `where_vars`.
pub fn read_expanded_csv(
    path: impl AsRef<Path>,
    estimand: EstimandType,
    kinds: &[CovariateSpec],
    where_vars: &[String],
) -> Result<ExpandedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(std::io::BufReader::new(file));
    let headers = reader.headers()?.clone();
    let idx = |name: &str| headers.iter().position(|h| h == name);
    let need =
        |name: &str| idx(name).ok_or_else(|| Error::Schema(format!("missing column `{name}` in {}", path.display())));
    let i_id = need("id")?;
    let i_trial = need("trial_period")?;
    let i_fu = need("followup_time")?;
    let i_out = need("outcome")?;
    let i_w = need("weight")?;
    let i_trt = need("treatment")?;
    let i_assigned = idx("assigned_treatment");
    let i_dose = idx("dose");
    let i_sw = idx("sample_weight");
    let structural = [
        "id",
        "trial_period",
        "followup_time",
        "outcome",
        "weight",
        "treatment",
        "assigned_treatment",
        "dose",
        "sample_weight",
    ];
    let mut covariates = Vec::new();
    let mut cov_idx = Vec::new();
    let mut wheres = Vec::new();
    let mut where_idx = Vec::new();
    for (j, h) in headers.iter().enumerate() {
        if structural.contains(&h) {
            continue;
        }
        if where_vars.iter().any(|w| w == h) {
            wheres.push(h.to_string());
            where_idx.push(j);
        } else {
            let kind = kinds
                .iter()
                .find(|c| c.name == h)
                .map_or(CovariateKind::Continuous, |c| c.kind);
            covariates.push(CovariateSpec {
                name: h.to_string(),
                kind,
            });
            cov_idx.push(j);
        }
    }
    let int = |s: &str, col: &str, row: usize| -> Result<i64> {
        s.trim().parse::<i64>().map_err(|_| Error::Row {
            row,
            message: format!("column `{col}` must be an integer, found `{s}`"),
        })
    };
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let get = |j: usize| rec.get(j).unwrap_or("");
        let ind = |j: usize, col: &str| -> Result<u8> {
            match int(get(j), col, row)? {
                v @ (0 | 1) => Ok(v as u8),
                v => Err(Error::Row {
                    row,
                    message: format!("column `{col}` must be 0 or 1, found {v}"),
                }),
            }
        };
        let treatment = ind(i_trt, "treatment")?;
        rows.push(ExpandedRow {
            id: int(get(i_id), "id", row)?,
            trial_period: int(get(i_trial), "trial_period", row)?,
            followup_time: int(get(i_fu), "followup_time", row)?,
            outcome: ind(i_out, "outcome")?,
            weight: parse_float(get(i_w), "weight", row)?,
            treatment,
            assigned_treatment: match i_assigned {
                Some(j) => ind(j, "assigned_treatment")?,
                None => treatment,
            },
            dose: match i_dose {
                Some(j) => int(get(j), "dose", row)? as u32,
                None => 0,
            },
            covariates: cov_idx
                .iter()
                .zip(&covariates)
                .map(|(&j, c)| parse_float(get(j), &c.name, row))
                .collect::<Result<_>>()?,
            where_values: where_idx
                .iter()
                .zip(&wheres)
                .map(|(&j, c)| parse_float(get(j), c, row))
                .collect::<Result<_>>()?,
            sample_weight: i_sw.map(|j| parse_float(get(j), "sample_weight", row)).transpose()?,
        });
    }
    Ok(ExpandedDataset {
        rows,
        schema: ExpandedSchema {
            covariates,
            where_vars: wheres,
            include_assigned_treatment: i_assigned.is_some(),
            include_dose: i_dose.is_some(),
            has_sample_weight: i_sw.is_some(),
        },
        estimand,
    })
}

/// Concatenates the trial files of a manifest, sorted by `(id, trial_period, followup_time)`.
pub fn read_trial_files(manifest: &TrialManifest) -> Result<ExpandedDataset> {
    let mut rows = Vec::new();
    let mut schema = manifest.schema.clone();
    for f in &manifest.files {
        let part = read_expanded_csv(
            &f.path,
            manifest.estimand,
            &manifest.schema.covariates,
            &manifest.schema.where_vars,
        )?;
        schema = part.schema;
        rows.extend(part.rows);
    }
    let mut data = ExpandedDataset {
        rows,
        schema,
        estimand: manifest.estimand,
    };
    data.sort();
    Ok(data)
}

/// Builds a manifest from the `trial_<m>.csv` files found in `dir`.
pub fn scan_trial_dir(
    dir: impl AsRef<Path>,
    estimand: EstimandType,
    kinds: &[CovariateSpec],
    where_vars: &[String],
) -> Result<TrialManifest> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(m) = trial_period_of(&path) {
            let rows = csv::Reader::from_path(&path)?.records().count();
            files.push(TrialFile {
                trial_period: m,
                path,
                rows,
            });
        }
    }
    files.sort_by_key(|f| f.trial_period);
    if files.is_empty() {
        return Err(Error::EmptyData(format!("no trial_<m>.csv files in {}", dir.display())));
    }
    let first = read_expanded_csv(&files[0].path, estimand, kinds, where_vars)?;
    Ok(TrialManifest {
        dir: dir.to_path_buf(),
        files,
        schema: first.schema,
        estimand,
    })
}
