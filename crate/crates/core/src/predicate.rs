//! Row filters of the form `age >= 30 && X3 == 1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    fn apply(self, a: f64, b: f64) -> bool {
        match self {
            CompareOp::Eq => a == b,
            CompareOp::Ne => a != b,
            CompareOp::Lt => a < b,
            CompareOp::Le => a <= b,
            CompareOp::Gt => a > b,
            CompareOp::Ge => a >= b,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "==",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variable: String,
    pub op: CompareOp,
    pub value: f64,
}

/// A conjunction of comparisons between a variable and a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Predicate {
    pub clauses: Vec<Comparison>,
}

impl Predicate {
    pub fn parse(src: &str) -> Result<Self> {
        let mut clauses = Vec::new();
        for part in src.split("&&") {
            clauses.push(parse_comparison(part.trim(), src)?);
        }
        Ok(Predicate { clauses })
    }

    pub fn variables(&self) -> Vec<&str> {
        self.clauses.iter().map(|c| c.variable.as_str()).collect()
    }

    /// Evaluates against `lookup`, which returns `None` for unknown variables.
    pub fn eval(&self, lookup: impl Fn(&str) -> Option<f64>) -> Result<bool> {
        for c in &self.clauses {
            let v = lookup(&c.variable)
                .ok_or_else(|| Error::Schema(format!("unknown variable `{}` in filter", c.variable)))?;
            if !c.op.apply(v, c.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn parse_comparison(part: &str, whole: &str) -> Result<Comparison> {
    let bad = || Error::Parameter(format!("cannot parse filter `{whole}`"));
    // Two-character operators first so `<=` is not read as `<`.
    let ops = [
        ("==", CompareOp::Eq),
        ("!=", CompareOp::Ne),
        ("<=", CompareOp::Le),
        (">=", CompareOp::Ge),
        ("<", CompareOp::Lt),
        (">", CompareOp::Gt),
    ];
    for (sym, op) in ops {
        if let Some(pos) = part.find(sym) {
            let variable = part[..pos].trim();
            let value = part[pos + sym.len()..].trim();
            if variable.is_empty() || !variable.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
                return Err(bad());
            }
            let value = match value {
                "TRUE" | "true" => 1.0,
                "FALSE" | "false" => 0.0,
                v => v.parse::<f64>().map_err(|_| bad())?,
            };
            return Ok(Comparison {
                variable: variable.to_string(),
                op,
                value,
            });
        }
    }
    Err(bad())
}

impl FromStr for Predicate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Predicate::parse(s)
    }
}

impl TryFrom<String> for Predicate {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Predicate::parse(&s)
    }
}

impl From<Predicate> for String {
    fn from(p: Predicate) -> String {
        p.to_string()
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" && ")?;
            }
            write!(f, "{} {} {}", c.variable, c.op.symbol(), c.value)?;
        }
        Ok(())
    }
}
