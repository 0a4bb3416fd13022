//! Model formulas and design matrices.
//!
//! Formulas use a small language: `y ~ 1 + X1 + pow(t,2) + ns(followup_time,3) + X3:X4`.
//! `I(t^2)` is accepted as a synonym for `pow(t,2)`. The intercept is always
//! present and always the first column.
//!
//! A [`DesignSpec`] freezes everything learned from training data (spline
//! knots, categorical levels) so that new data is encoded identically.

mod spline;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use spline::quantile_sorted;
pub use spline::{natural_spline_basis, SplineBasisSpec};

/// Column-oriented table of numeric variables.
#[derive(Debug, Clone, Default)]
pub struct Frame {
    nrows: usize,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    categorical: BTreeSet<String>,
}

impl Frame {
    pub fn new(nrows: usize) -> Self {
        Frame {
            nrows,
            ..Default::default()
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Adds or replaces a column.
    pub fn set(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.nrows {
            return Err(Error::Schema(format!(
                "column `{name}` has {} values, frame has {} rows",
                values.len(),
                self.nrows
            )));
        }
        match self.index.get(&name) {
            Some(&i) => self.columns[i] = values,
            None => {
                self.index.insert(name.clone(), self.columns.len());
                self.names.push(name);
                self.columns.push(values);
            }
        }
        Ok(())
    }

    pub fn mark_categorical(&mut self, name: impl Into<String>) {
        self.categorical.insert(name.into());
    }

    pub fn is_categorical(&self, name: &str) -> bool {
        self.categorical.contains(name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.columns[i].as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::Schema(format!("unknown variable `{name}`")))
    }

    /// Keeps the rows whose mask entry is true.
    pub fn filter(&self, mask: &[bool]) -> Frame {
        let nrows = mask.iter().filter(|m| **m).count();
        let columns = self
            .columns
            .iter()
            .map(|c| c.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect())
            .collect();
        Frame {
            nrows,
            names: self.names.clone(),
            columns,
            index: self.index.clone(),
            categorical: self.categorical.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermSpec {
    Intercept,
    Linear(String),
    Power { var: String, exponent: u32 },
    Spline { var: String, df: usize },
    Interaction(Box<TermSpec>, Box<TermSpec>),
}

impl TermSpec {
    pub fn linear(var: impl Into<String>) -> Self {
        TermSpec::Linear(var.into())
    }

    pub fn power(var: impl Into<String>, exponent: u32) -> Self {
        TermSpec::Power {
            var: var.into(),
            exponent,
        }
    }

    pub fn spline(var: impl Into<String>, df: usize) -> Self {
        TermSpec::Spline { var: var.into(), df }
    }

    pub fn interaction(a: TermSpec, b: TermSpec) -> Self {
        TermSpec::Interaction(Box::new(a), Box::new(b))
    }

    /// Variables referenced by the term, in order of appearance.
    pub fn variables(&self) -> Vec<&str> {
        match self {
            TermSpec::Intercept => vec![],
            TermSpec::Linear(v) | TermSpec::Power { var: v, .. } | TermSpec::Spline { var: v, .. } => {
                vec![v.as_str()]
            }
            TermSpec::Interaction(a, b) => {
                let mut v = a.variables();
                v.extend(b.variables());
                v
            }
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            TermSpec::Power { exponent, var } if *exponent < 2 => {
                Err(Error::Formula(format!("power of `{var}` must have exponent >= 2")))
            }
            TermSpec::Spline { df, var } if *df < 1 => {
                Err(Error::Formula(format!("spline of `{var}` must have df >= 1")))
            }
            TermSpec::Interaction(a, b) => {
                if matches!(**a, TermSpec::Intercept) || matches!(**b, TermSpec::Intercept) {
                    return Err(Error::Formula("intercept cannot appear in an interaction".into()));
                }
                a.check()?;
                b.check()
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TermSpec::Intercept => f.write_str("(Intercept)"),
            TermSpec::Linear(v) => f.write_str(v),
            TermSpec::Power { var, exponent } => write!(f, "pow({var},{exponent})"),
            TermSpec::Spline { var, df } => write!(f, "ns({var},{df})"),
            TermSpec::Interaction(a, b) => write!(f, "{a}:{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFormula {
    pub response: Option<String>,
    terms: Vec<TermSpec>,
}

impl ModelFormula {
    /// Builds a formula, putting a single intercept first.
    pub fn new(response: Option<String>, terms: impl IntoIterator<Item = TermSpec>) -> Result<Self> {
        let mut out = vec![TermSpec::Intercept];
        for t in terms {
            if t == TermSpec::Intercept {
                continue;
            }
            t.check()?;
            if !out.contains(&t) {
                out.push(t);
            }
        }
        Ok(ModelFormula { response, terms: out })
    }

    pub fn intercept_only() -> Self {
        ModelFormula {
            response: None,
            terms: vec![TermSpec::Intercept],
        }
    }

    pub fn parse(src: &str) -> Result<Self> {
        let (response, rhs) = match src.split_once('~') {
            Some((lhs, rhs)) => {
                let lhs = lhs.trim();
                let response = if lhs.is_empty() {
                    None
                } else {
                    check_ident(lhs)?;
                    Some(lhs.to_string())
                };
                (response, rhs)
            }
            None => (None, src),
        };
        let terms = parse_terms(rhs)?;
        ModelFormula::new(response, terms)
    }

    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    /// Terms after the intercept.
    pub fn predictors(&self) -> &[TermSpec] {
        &self.terms[1..]
    }

    pub fn variables(&self) -> BTreeSet<String> {
        self.terms
            .iter()
            .flat_map(|t| t.variables())
            .map(str::to_string)
            .collect()
    }

    /// Appends the non-intercept terms of `other`.
    pub fn extend(&mut self, other: &[TermSpec]) -> Result<()> {
        for t in other {
            if *t == TermSpec::Intercept {
                continue;
            }
            t.check()?;
            if !self.terms.contains(t) {
                self.terms.push(t.clone());
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.response {
            write!(f, "{r} ")?;
        }
        f.write_str("~ 1")?;
        for t in self.predictors() {
            write!(f, " + {t}")?;
        }
        Ok(())
    }
}

/// Parses the right-hand side of a formula (no `~`) into terms.
pub fn parse_terms(src: &str) -> Result<Vec<TermSpec>> {
    let src = src.trim();
    if src.is_empty() {
        return Ok(vec![]);
    }
    split_top_level(src, '+')?
        .into_iter()
        .map(|piece| parse_term(piece.trim()))
        .collect()
}

fn split_top_level(src: &str, sep: char) -> Result<Vec<&str>> {
    let mut depth = 0i32;
    let mut start = 0;
    let mut parts = Vec::new();
    for (i, c) in src.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::Formula(format!("unbalanced parentheses in `{src}`")));
                }
            }
            c if c == sep && depth == 0 => {
                parts.push(&src[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::Formula(format!("unbalanced parentheses in `{src}`")));
    }
    parts.push(&src[start..]);
    Ok(parts)
}

fn check_ident(s: &str) -> Result<()> {
    let ok = !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !s.starts_with(|c: char| c.is_ascii_digit());
    if ok {
        Ok(())
    } else {
        Err(Error::Formula(format!("invalid variable name `{s}`")))
    }
}

fn call_args<'a>(piece: &'a str, name: &str) -> Option<&'a str> {
    let rest = piece.strip_prefix(name)?.trim_start();
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    Some(inner)
}

fn parse_term(piece: &str) -> Result<TermSpec> {
    if piece.is_empty() {
        return Err(Error::Formula("empty term".into()));
    }
    let factors = split_top_level(piece, ':')?;
    if factors.len() > 1 {
        let mut iter = factors.into_iter();
        let mut acc = parse_term(iter.next().unwrap().trim())?;
        for f in iter {
            acc = TermSpec::interaction(acc, parse_term(f.trim())?);
        }
        acc.check()?;
        return Ok(acc);
    }
    if piece == "1" {
        return Ok(TermSpec::Intercept);
    }
    if let Some(args) = call_args(piece, "ns") {
        let (var, df) = two_args(args, "ns")?;
        let df = df.trim_start_matches("df").trim_start().trim_start_matches('=').trim();
        let df: usize = df
            .parse()
            .map_err(|_| Error::Formula(format!("invalid spline df in `{piece}`")))?;
        let t = TermSpec::spline(var, df);
        t.check()?;
        return Ok(t);
    }
    if let Some(args) = call_args(piece, "pow") {
        let (var, k) = two_args(args, "pow")?;
        let k: u32 = k
            .parse()
            .map_err(|_| Error::Formula(format!("invalid exponent in `{piece}`")))?;
        let t = TermSpec::power(var, k);
        t.check()?;
        return Ok(t);
    }
    if let Some(inner) = call_args(piece, "I") {
        let (var, k) = inner
            .split_once('^')
            .ok_or_else(|| Error::Formula(format!("only I(var^k) is supported, got `{piece}`")))?;
        let var = var.trim();
        check_ident(var)?;
        let k: u32 = k
            .trim()
            .parse()
            .map_err(|_| Error::Formula(format!("invalid exponent in `{piece}`")))?;
        let t = TermSpec::power(var, k);
        t.check()?;
        return Ok(t);
    }
    check_ident(piece)?;
    Ok(TermSpec::linear(piece))
}

fn two_args<'a>(args: &'a str, func: &str) -> Result<(&'a str, &'a str)> {
    let (a, b) = args
        .split_once(',')
        .ok_or_else(|| Error::Formula(format!("{func}() takes two arguments")))?;
    let a = a.trim();
    check_ident(a)?;
    Ok((a, b.trim()))
}

/// A formula together with everything learned from its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub formula: ModelFormula,
    /// Spline bases keyed by the term label, e.g. `ns(followup_time,3)`.
    pub splines: BTreeMap<String, SplineBasisSpec>,
    /// Levels of categorical variables; the first is the reference level.
    pub levels: BTreeMap<String, Vec<f64>>,
    pub column_names: Vec<String>,
}

impl DesignSpec {
    /// Freezes spline knots and categorical levels from `frame`.
    pub fn train(formula: &ModelFormula, frame: &Frame) -> Result<Self> {
        let mut splines = BTreeMap::new();
        let mut levels = BTreeMap::new();
        for term in formula.terms() {
            collect_training(term, frame, &mut splines, &mut levels)?;
        }
        let mut spec = DesignSpec {
            formula: formula.clone(),
            splines,
            levels,
            column_names: vec![],
        };
        let names = spec.term_columns_names();
        spec.column_names = names;
        Ok(spec)
    }

    pub fn ncols(&self) -> usize {
        self.column_names.len()
    }

    fn term_columns_names(&self) -> Vec<String> {
        self.formula.terms().iter().flat_map(|t| self.names_for(t)).collect()
    }

    fn names_for(&self, term: &TermSpec) -> Vec<String> {
        match term {
            TermSpec::Intercept => vec!["(Intercept)".into()],
            TermSpec::Linear(v) => match self.levels.get(v) {
                Some(lv) => lv[1..].iter().map(|l| format!("{v}[{l}]")).collect(),
                None => vec![v.clone()],
            },
            TermSpec::Power { .. } => vec![term.to_string()],
            TermSpec::Spline { df, .. } => {
                let label = term.to_string();
                (1..=*df).map(|j| format!("{label}#{j}")).collect()
            }
            TermSpec::Interaction(a, b) => {
                let left = self.names_for(a);
                let right = self.names_for(b);
                let mut out = Vec::with_capacity(left.len() * right.len());
                for l in &left {
                    for r in &right {
                        out.push(format!("{l}:{r}"));
                    }
                }
                out
            }
        }
    }

    fn columns_for(&self, term: &TermSpec, frame: &Frame) -> Result<Vec<Vec<f64>>> {
        let n = frame.nrows();
        match term {
            TermSpec::Intercept => Ok(vec![vec![1.0; n]]),
            TermSpec::Linear(v) => {
                let x = column_checked(frame, v)?;
                match self.levels.get(v) {
                    Some(lv) => {
                        for (i, xi) in x.iter().enumerate() {
                            if !lv.contains(xi) {
                                return Err(Error::Row {
                                    row: i + 1,
                                    message: format!("unseen level {xi} of categorical `{v}`"),
                                });
                            }
                        }
                        Ok(lv[1..]
                            .iter()
                            .map(|l| x.iter().map(|xi| if xi == l { 1.0 } else { 0.0 }).collect())
                            .collect())
                    }
                    None => Ok(vec![x.to_vec()]),
                }
            }
            TermSpec::Power { var, exponent } => {
                let x = column_checked(frame, var)?;
                Ok(vec![x.iter().map(|v| v.powi(*exponent as i32)).collect()])
            }
            TermSpec::Spline { var, .. } => {
                let x = column_checked(frame, var)?;
                let spec = self
                    .splines
                    .get(&term.to_string())
                    .ok_or_else(|| Error::Integrity(format!("no frozen basis for `{term}`")))?;
                let m = natural_spline_basis(x, spec)?;
                Ok((0..m.ncols()).map(|c| m.column(c).iter().copied().collect()).collect())
            }
            TermSpec::Interaction(a, b) => {
                let left = self.columns_for(a, frame)?;
                let right = self.columns_for(b, frame)?;
                let mut out = Vec::with_capacity(left.len() * right.len());
                for l in &left {
                    for r in &right {
                        out.push(l.iter().zip(r).map(|(p, q)| p * q).collect());
                    }
                }
                Ok(out)
            }
        }
    }

    /// Encodes `frame` into a design matrix with columns `self.column_names`.
    pub fn build(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        let mut data = Vec::with_capacity(frame.nrows() * self.ncols());
        for term in self.formula.terms() {
            for col in self.columns_for(term, frame)? {
                data.extend(col);
            }
        }
        Ok(DMatrix::from_vec(frame.nrows(), self.ncols(), data))
    }
}

fn column_checked<'a>(frame: &'a Frame, var: &str) -> Result<&'a [f64]> {
    let x = frame.require(var)?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Row {
            row: i + 1,
            message: format!("non-finite value in `{var}`"),
        });
    }
    Ok(x)
}

fn collect_training(
    term: &TermSpec,
    frame: &Frame,
    splines: &mut BTreeMap<String, SplineBasisSpec>,
    levels: &mut BTreeMap<String, Vec<f64>>,
) -> Result<()> {
    match term {
        TermSpec::Intercept => Ok(()),
        TermSpec::Linear(v) => {
            let x = column_checked(frame, v)?;
            if frame.is_categorical(v) && !levels.contains_key(v) {
                levels.insert(v.clone(), categorical_levels(x));
            }
            Ok(())
        }
        TermSpec::Power { var, .. } => {
            column_checked(frame, var)?;
            if frame.is_categorical(var) {
                return Err(Error::Formula(format!("cannot raise categorical `{var}` to a power")));
            }
            Ok(())
        }
        TermSpec::Spline { var, df } => {
            let x = column_checked(frame, var)?;
            if frame.is_categorical(var) {
                return Err(Error::Formula(format!("cannot build a spline of categorical `{var}`")));
            }
            let key = term.to_string();
            if let std::collections::btree_map::Entry::Vacant(e) = splines.entry(key) {
                e.insert(SplineBasisSpec::from_data(x, *df)?);
            }
            Ok(())
        }
        TermSpec::Interaction(a, b) => {
            collect_training(a, frame, splines, levels)?;
            collect_training(b, frame, splines, levels)
        }
    }
}

/// Distinct values ordered by their textual form; the first is the reference.
fn categorical_levels(x: &[f64]) -> Vec<f64> {
    let mut by_text: BTreeMap<String, f64> = BTreeMap::new();
    for &v in x {
        by_text.entry(v.to_string()).or_insert(v);
    }
    by_text.into_values().collect()
}

/// Trains a design on `rows` and encodes them in one step.
pub fn build_design_matrix(formula: &ModelFormula, rows: &Frame) -> Result<(DMatrix<f64>, Vec<String>)> {
    let spec = DesignSpec::train(formula, rows)?;
    let m = spec.build(rows)?;
    Ok((m, spec.column_names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_full_grammar() {
        let f = ModelFormula::parse("y ~ 1 + X1 + pow(t,2) + ns(followup_time,3) + X3:X4").unwrap();
        assert_eq!(f.response.as_deref(), Some("y"));
        assert_eq!(
            f.terms(),
            &[
                TermSpec::Intercept,
                TermSpec::linear("X1"),
                TermSpec::power("t", 2),
                TermSpec::spline("followup_time", 3),
                TermSpec::interaction(TermSpec::linear("X3"), TermSpec::linear("X4")),
            ]
        );
    }

    #[test]
    fn intercept_always_first_and_unique() {
        let f = ModelFormula::parse("~ x + 1 + z + 1").unwrap();
        assert_eq!(f.terms()[0], TermSpec::Intercept);
        assert_eq!(f.terms().iter().filter(|t| **t == TermSpec::Intercept).count(), 1);
        assert_eq!(f.terms().len(), 3);
    }

    #[test]
    fn r_style_synonyms() {
        let f = ModelFormula::parse("~ time_on_regime + I(time_on_regime^2) + ns(k, df = 3)").unwrap();
        assert_eq!(f.terms()[2], TermSpec::power("time_on_regime", 2));
        assert_eq!(f.terms()[3], TermSpec::spline("k", 3));
    }

    #[test]
    fn bad_terms_rejected() {
        assert!(ModelFormula::parse("~ pow(x,1)").is_err());
        assert!(ModelFormula::parse("~ ns(x,0)").is_err());
        assert!(ModelFormula::parse("~ ns(x,3").is_err());
        assert!(ModelFormula::parse("~ 3x").is_err());
        assert!(ModelFormula::parse("~ x + ").is_err());
    }

    #[test]
    fn display_round_trips() {
        let f = ModelFormula::parse("y ~ a + pow(b,3) + ns(c,2) + a:b").unwrap();
        assert_eq!(ModelFormula::parse(&f.to_string()).unwrap(), f);
    }

    #[test]
    fn simulated_row_design() {
        let mut frame = Frame::new(1);
        frame.set("X3", vec![0.0]).unwrap();
        frame.set("X4", vec![0.96]).unwrap();
        let f = ModelFormula::parse("~ 1 + X3 + X4").unwrap();
        let (m, names) = build_design_matrix(&f, &frame).unwrap();
        assert_eq!(names, vec!["(Intercept)", "X3", "X4"]);
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.96]);
    }

    #[test]
    fn intercept_only_is_ones() {
        let frame = Frame::new(5);
        let (m, _) = build_design_matrix(&ModelFormula::intercept_only(), &frame).unwrap();
        assert_eq!(m.shape(), (5, 1));
        assert!(m.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn quadratic_in_t() {
        let mut frame = Frame::new(1);
        frame.set("t", vec![3.0]).unwrap();
        let (m, names) = build_design_matrix(&ModelFormula::parse("~ t + pow(t,2)").unwrap(), &frame).unwrap();
        assert_eq!(names, vec!["(Intercept)", "t", "pow(t,2)"]);
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0, 9.0]);
    }

    #[test]
    fn unknown_variable_named() {
        let frame = Frame::new(2);
        let err = build_design_matrix(&ModelFormula::parse("~ ghost").unwrap(), &frame).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn non_finite_value_reports_row() {
        let mut frame = Frame::new(3);
        frame.set("x", vec![1.0, f64::NAN, 2.0]).unwrap();
        let err = build_design_matrix(&ModelFormula::parse("~ x").unwrap(), &frame).unwrap_err();
        assert!(matches!(err, Error::Row { row: 2, .. }));
    }

    #[test]
    fn categorical_one_hot_reference_is_smallest_text() {
        let mut frame = Frame::new(4);
        frame.set("g", vec![2.0, 10.0, 3.0, 2.0]).unwrap();
        frame.mark_categorical("g");
        let (m, names) = build_design_matrix(&ModelFormula::parse("~ g").unwrap(), &frame).unwrap();
        // textual order: "10" < "2" < "3"
        assert_eq!(names, vec!["(Intercept)", "g[2]", "g[3]"]);
        assert_eq!(
            m.column(1).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(
            m.column(2).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn spline_columns_named_and_frozen() {
        let mut frame = Frame::new(10);
        frame.set("k", (0..10).map(f64::from).collect()).unwrap();
        let spec = DesignSpec::train(&ModelFormula::parse("~ ns(k,3)").unwrap(), &frame).unwrap();
        assert_eq!(
            spec.column_names,
            vec!["(Intercept)", "ns(k,3)#1", "ns(k,3)#2", "ns(k,3)#3"]
        );
        let mut other = Frame::new(1);
        other.set("k", vec![9.0]).unwrap();
        let m = spec.build(&other).unwrap();
        assert!((m[(0, 3)] - 0.7142857142857143).abs() < 1e-12);
    }
}
