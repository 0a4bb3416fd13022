//! Person-period observational data: column mapping, CSV ingestion and validation.
//!
//! Records are kept sorted by `(id, period)`. Each individual's records form a
//! contiguous block, and every downstream stage (expansion, weight models)
//! walks these blocks in order.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Binary,
    #[default]
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "CovariateSpecRepr")]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CovariateSpecRepr {
    Name(String),
    Full {
        name: String,
        #[serde(default)]
        kind: CovariateKind,
    },
}

impl From<CovariateSpecRepr> for CovariateSpec {
    fn from(r: CovariateSpecRepr) -> Self {
        match r {
            CovariateSpecRepr::Name(name) => CovariateSpec {
                name,
                kind: CovariateKind::Continuous,
            },
            CovariateSpecRepr::Full { name, kind } => CovariateSpec { name, kind },
        }
    }
}

impl CovariateSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        CovariateSpec {
            name: name.into(),
            kind: CovariateKind::Continuous,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        CovariateSpec {
            name: name.into(),
            kind: CovariateKind::Binary,
        }
    }
}

/// Maps the roles the pipeline needs onto column names of the input file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id: String,
    pub period: String,
    pub treatment: String,
    pub outcome: String,
    pub eligible: String,
    #[serde(default)]
    pub censored: Option<String>,
    #[serde(default)]
    pub covariates: Vec<CovariateSpec>,
}

impl ColumnMap {
    /// Column map of the simulated data layout (`ID, t, A, ..., Y, C, eligible`).
    pub fn simulated() -> Self {
        ColumnMap {
            id: "ID".into(),
            period: "t".into(),
            treatment: "A".into(),
            outcome: "Y".into(),
            eligible: "eligible".into(),
            censored: Some("C".into()),
            covariates: vec![
                CovariateSpec::binary("X1"),
                CovariateSpec::continuous("X2"),
                CovariateSpec::binary("X3"),
                CovariateSpec::continuous("X4"),
                CovariateSpec::continuous("age"),
                CovariateSpec::continuous("age_s"),
            ],
        }
    }

    fn role_columns(&self) -> Vec<&str> {
        let mut cols = vec![
            self.id.as_str(),
            self.period.as_str(),
            self.treatment.as_str(),
            self.outcome.as_str(),
            self.eligible.as_str(),
        ];
        if let Some(c) = &self.censored {
            cols.push(c);
        }
        cols
    }

    /// Every mapped column, roles first then covariates.
    pub fn all_columns(&self) -> Vec<&str> {
        let mut cols = self.role_columns();
        cols.extend(self.covariates.iter().map(|c| c.name.as_str()));
        cols
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self.all_columns();
        let mut seen = std::collections::HashSet::new();
        for c in &cols {
            if c.is_empty() {
                return Err(Error::Schema("empty column name in column map".into()));
            }
            if !seen.insert(*c) {
                return Err(Error::Schema(format!("column `{c}` is mapped more than once")));
            }
        }
        Ok(())
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub id: i64,
    pub period: i64,
    pub treatment: u8,
    pub outcome: u8,
    pub eligible: u8,
    pub censored: u8,
    /// Values aligned with `ColumnMap::covariates`.
    pub covariates: Vec<f64>,
    /// Set by [`derive_time_on_regime`](crate::expansion::derive_time_on_regime).
    pub time_on_regime: Option<u32>,
}

/// Validated person-period data, sorted by `(id, period)`.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    records: Vec<LongitudinalRecord>,
    column_map: ColumnMap,
    groups: Vec<Range<usize>>,
}

impl LongitudinalDataset {
    /// Sorts the records and checks every structural invariant.
    pub fn new(mut records: Vec<LongitudinalRecord>, column_map: ColumnMap) -> Result<Self> {
        column_map.validate()?;
        records.sort_by_key(|r| (r.id, r.period));
        let ds = Self::from_records_unchecked(records, column_map);
        let report = validate_dataset(&ds);
        report.into_result()?;
        Ok(ds)
    }

    /// Builds a dataset without sorting or validating. Intended for callers that
    /// want a [`ValidationReport`] for data that may violate invariants.
    pub fn from_records_unchecked(records: Vec<LongitudinalRecord>, column_map: ColumnMap) -> Self {
        let groups = group_ranges(&records);
        LongitudinalDataset {
            records,
            column_map,
            groups,
        }
    }

    pub fn records(&self) -> &[LongitudinalRecord] {
        &self.records
    }

    pub fn column_map(&self) -> &ColumnMap {
        &self.column_map
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Contiguous record blocks, one per individual.
    pub fn individuals(&self) -> impl Iterator<Item = &[LongitudinalRecord]> + '_ {
        self.groups.iter().map(move |g| &self.records[g.clone()])
    }

    pub fn n_individuals(&self) -> usize {
        self.groups.len()
    }

    pub(crate) fn group_ranges(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub(crate) fn records_mut(&mut self) -> &mut [LongitudinalRecord] {
        &mut self.records
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.column_map.covariate_index(name)
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.column_map.covariates.iter().map(|c| c.name.clone()).collect()
    }

    /// Keeps only the individuals whose ids satisfy `keep`.
    pub fn filter_ids(&self, keep: impl Fn(i64) -> bool) -> Self {
        let records = self.records.iter().filter(|r| keep(r.id)).cloned().collect();
        Self::from_records_unchecked(records, self.column_map.clone())
    }
}

fn group_ranges(records: &[LongitudinalRecord]) -> Vec<Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].id != records[start].id {
            if i > start {
                groups.push(start..i);
            }
            start = i;
        }
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationRule {
    IndicatorDomain,
    NonFiniteCovariate,
    BinaryCovariateDomain,
    Unsorted,
    DuplicatePeriod,
    PostOutcome,
    PostCensoring,
    OutcomeAndCensored,
}

impl ValidationRule {
    pub const ALL: [ValidationRule; 8] = [
        ValidationRule::IndicatorDomain,
        ValidationRule::NonFiniteCovariate,
        ValidationRule::BinaryCovariateDomain,
        ValidationRule::Unsorted,
        ValidationRule::DuplicatePeriod,
        ValidationRule::PostOutcome,
        ValidationRule::PostCensoring,
        ValidationRule::OutcomeAndCensored,
    ];
}

impl fmt::Display for ValidationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValidationRule::IndicatorDomain => "indicator not in {0,1}",
            ValidationRule::NonFiniteCovariate => "non-finite covariate",
            ValidationRule::BinaryCovariateDomain => "binary covariate not in {0,1}",
            ValidationRule::Unsorted => "records not sorted by (id, period)",
            ValidationRule::DuplicatePeriod => "duplicate period within id",
            ValidationRule::PostOutcome => "record after outcome event",
            ValidationRule::PostCensoring => "record after censoring",
            ValidationRule::OutcomeAndCensored => "outcome and censoring in the same record",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RuleSummary {
    pub rule: ValidationRule,
    pub count: usize,
    /// Zero-based index of the first offending record.
    pub first_row: Option<usize>,
    /// Distinct ids with at least one violation, in order of appearance.
    pub ids: Vec<i64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub rules: Vec<RuleSummary>,
}

impl ValidationReport {
    pub fn count(&self, rule: ValidationRule) -> usize {
        self.get(rule).map_or(0, |r| r.count)
    }

    pub fn get(&self, rule: ValidationRule) -> Option<&RuleSummary> {
        self.rules.iter().find(|r| r.rule == rule)
    }

    pub fn total_violations(&self) -> usize {
        self.rules.iter().map(|r| r.count).sum()
    }

    pub fn is_clean(&self) -> bool {
        self.total_violations() == 0
    }

    fn into_result(self) -> Result<()> {
        match self.rules.iter().find(|r| r.count > 0) {
            None => Ok(()),
            Some(r) => {
                let ids: Vec<String> = r.ids.iter().map(|i| i.to_string()).collect();
                Err(Error::Validation(format!(
                    "{} ({} violation(s), ids: {})",
                    r.rule,
                    r.count,
                    ids.join(", ")
                )))
            }
        }
    }
}

/// Counts violations of every dataset rule without modifying the data.
pub fn validate_dataset(ds: &LongitudinalDataset) -> ValidationReport {
    let mut summaries: HashMap<ValidationRule, RuleSummary> = ValidationRule::ALL
        .iter()
        .map(|&rule| {
            (
                rule,
                RuleSummary {
                    rule,
                    count: 0,
                    first_row: None,
                    ids: Vec::new(),
                },
            )
        })
        .collect();
    let mut hit = |rule: ValidationRule, row: usize, id: i64| {
        let s = summaries.get_mut(&rule).expect("all rules present");
        s.count += 1;
        s.first_row.get_or_insert(row);
        if !s.ids.contains(&id) {
            s.ids.push(id);
        }
    };

    let kinds: Vec<CovariateKind> = ds.column_map.covariates.iter().map(|c| c.kind).collect();
    let recs = &ds.records;
    for (i, r) in recs.iter().enumerate() {
        if [r.treatment, r.outcome, r.eligible, r.censored].iter().any(|&v| v > 1) {
            hit(ValidationRule::IndicatorDomain, i, r.id);
        }
        if r.covariates.iter().any(|v| !v.is_finite()) {
            hit(ValidationRule::NonFiniteCovariate, i, r.id);
        }
        if r.covariates
            .iter()
            .zip(&kinds)
            .any(|(v, k)| *k == CovariateKind::Binary && *v != 0.0 && *v != 1.0)
        {
            hit(ValidationRule::BinaryCovariateDomain, i, r.id);
        }
        if r.outcome == 1 && r.censored == 1 {
            hit(ValidationRule::OutcomeAndCensored, i, r.id);
        }
        if i > 0 {
            let p = &recs[i - 1];
            if (p.id, p.period) > (r.id, r.period) {
                hit(ValidationRule::Unsorted, i, r.id);
            }
            if p.id == r.id {
                if p.period == r.period {
                    hit(ValidationRule::DuplicatePeriod, i, r.id);
                }
                if p.outcome == 1 {
                    hit(ValidationRule::PostOutcome, i, r.id);
                }
                if p.censored == 1 {
                    hit(ValidationRule::PostCensoring, i, r.id);
                }
            }
        }
    }
    let rules = ValidationRule::ALL
        .iter()
        .map(|r| summaries.remove(r).expect("present"))
        .collect();
    ValidationReport { rules }
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
}

fn parse_indicator(field: &str, column: &str, row: usize) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => match other.parse::<f64>() {
            Ok(0.0) => Ok(0),
            Ok(1.0) => Ok(1),
            _ => Err(Error::Row {
                row,
                message: format!("column `{column}` must be 0 or 1, found `{other}`"),
            }),
        },
    }
}

fn parse_int(field: &str, column: &str, row: usize) -> Result<i64> {
    let f = field.trim();
    if let Ok(v) = f.parse::<i64>() {
        return Ok(v);
    }
    match f.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
        _ => Err(Error::Row {
            row,
            message: format!("column `{column}` must be an integer, found `{f}`"),
        }),
    }
}

pub(crate) fn parse_float(field: &str, column: &str, row: usize) -> Result<f64> {
    let f = field.trim();
    if f.is_empty() {
        return Err(Error::Row {
            row,
            message: format!("missing value in column `{column}`"),
        });
    }
    match f.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Row {
            row,
            message: format!("column `{column}` must be a finite number, found `{f}`"),
        }),
    }
}

/// Reads a comma-separated person-period file. Row numbers in errors count data
/// rows from 1 (the header is not counted).
pub fn load_longitudinal_csv(path: impl AsRef<Path>, column_map: &ColumnMap) -> Result<LongitudinalDataset> {
    let path = path.as_ref();
    column_map.validate()?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();

    let idx_id = find_column(&headers, &column_map.id)?;
    let idx_period = find_column(&headers, &column_map.period)?;
    let idx_trt = find_column(&headers, &column_map.treatment)?;
    let idx_out = find_column(&headers, &column_map.outcome)?;
    let idx_elig = find_column(&headers, &column_map.eligible)?;
    let idx_cens = column_map
        .censored
        .as_deref()
        .map(|c| find_column(&headers, c))
        .transpose()?;
    let idx_cov = column_map
        .covariates
        .iter()
        .map(|c| find_column(&headers, &c.name))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let get = |idx: usize| rec.get(idx).unwrap_or("");
        let covariates = idx_cov
            .iter()
            .zip(&column_map.covariates)
            .map(|(&j, spec)| parse_float(get(j), &spec.name, row))
            .collect::<Result<Vec<_>>>()?;
        for (v, spec) in covariates.iter().zip(&column_map.covariates) {
            if spec.kind == CovariateKind::Binary && *v != 0.0 && *v != 1.0 {
                return Err(Error::Row {
                    row,
                    message: format!("binary covariate `{}` must be 0 or 1, found {v}", spec.name),
                });
            }
        }
        let outcome = parse_indicator(get(idx_out), &column_map.outcome, row)?;
        let censored = match (idx_cens, &column_map.censored) {
            (Some(j), Some(name)) => parse_indicator(get(j), name, row)?,
            _ => 0,
        };
        if outcome == 1 && censored == 1 {
            return Err(Error::Row {
                row,
                message: "record is both an outcome event and censored".into(),
            });
        }
        records.push(LongitudinalRecord {
            id: parse_int(get(idx_id), &column_map.id, row)?,
            period: parse_int(get(idx_period), &column_map.period, row)?,
            treatment: parse_indicator(get(idx_trt), &column_map.treatment, row)?,
            outcome,
            eligible: parse_indicator(get(idx_elig), &column_map.eligible, row)?,
            censored,
            covariates,
            time_on_regime: None,
        });
    }
    LongitudinalDataset::new(records, column_map.clone())
}

/// Writes the dataset in the layout read by [`load_longitudinal_csv`].
pub fn write_longitudinal_csv(ds: &LongitudinalDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let map = &ds.column_map;
    let mut header = vec![map.id.as_str(), map.period.as_str(), map.treatment.as_str()];
    header.extend(map.covariates.iter().map(|c| c.name.as_str()));
    header.push(&map.outcome);
    if let Some(c) = &map.censored {
        header.push(c);
    }
    header.push(&map.eligible);
    w.write_record(&header)?;
    let mut fields: Vec<String> = Vec::new();
    for r in &ds.records {
        fields.clear();
        fields.push(r.id.to_string());
        fields.push(r.period.to_string());
        fields.push(r.treatment.to_string());
        fields.extend(r.covariates.iter().map(|v| v.to_string()));
        fields.push(r.outcome.to_string());
        if map.censored.is_some() {
            fields.push(r.censored.to_string());
        }
        fields.push(r.eligible.to_string());
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
