//! Reports: checks, provenance and JSON/CSV emission.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::spec::ExperimentSpec;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// One pass/fail record. Non-finite values serialize as `null`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    /// Sample that produced the value; always present on failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Value>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl Check {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Check {
        Check { name: name.into(), value: finite(value), tolerance, pass: value <= tolerance, witness: None }
    }

    /// Passes when `value >= bound`.
    pub fn at_least(name: &str, value: f64, bound: f64) -> Check {
        Check { name: name.into(), value: finite(value), tolerance: bound, pass: value >= bound, witness: None }
    }

    pub fn new(name: &str, value: f64, tolerance: f64, pass: bool) -> Check {
        Check { name: name.into(), value: finite(value), tolerance, pass: pass && !value.is_nan(), witness: None }
    }

    pub fn witness(mut self, w: Value) -> Check {
        self.witness = Some(w);
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub package: String,
    pub version: String,
    pub seed: u64,
}

/// Rows for per-point scans.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub spec: ExperimentSpec,
    pub payload: Value,
    /// Sorted by name.
    pub checks: Vec<Check>,
    pub provenance: Provenance,
    /// The only field that varies between identical runs.
    pub wall_clock_ms: u64,
    #[serde(skip)]
    pub table: Option<Table>,
}

impl Report {
    pub fn new(spec: &ExperimentSpec, payload: Value, mut checks: Vec<Check>) -> Result<Report, CliError> {
        if checks.is_empty() {
            return Err(CliError::Internal("report has no checks".into()));
        }
        checks.sort_by(|a, b| a.name.cmp(&b.name));
        for c in checks.iter_mut().filter(|c| !c.pass && c.witness.is_none()) {
            c.witness = Some(json!({ "value": c.value }));
        }
        Ok(Report {
            schema_version: SCHEMA_VERSION,
            command: spec.command.clone(),
            spec: spec.clone(),
            payload,
            checks,
            provenance: Provenance {
                package: env!("CARGO_PKG_NAME").into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed: spec.seed,
            },
            wall_clock_ms: 0,
            table: None,
        })
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let t = self
            .table
            .as_ref()
            .ok_or_else(|| CliError::Validation(format!("'{}' has no per-point table; use --format json", self.command)))?;
        let mut s = t.header.join(",");
        s.push('\n');
        for r in &t.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        Ok(s)
    }

    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Json => Ok(self.to_json()),
            Format::Csv => self.to_csv(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

/// Writes the rendered report to `path`, or stdout when `None`.
pub fn emit(report: &Report, format: Format, path: Option<&Path>) -> Result<(), CliError> {
    let text = report.render(format)?;
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display()))),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string())),
    }
}

/// Structural check of an emitted JSON report.
pub fn validate_json(v: &Value) -> Result<(), String> {
    let obj = v.as_object().ok_or("report is not an object")?;
    for key in ["schema_version", "command", "spec", "payload", "checks", "provenance", "wall_clock_ms"] {
        if !obj.contains_key(key) {
            return Err(format!("missing field '{key}'"));
        }
    }
    if obj["schema_version"].as_u64() != Some(SCHEMA_VERSION as u64) {
        return Err("unsupported schema_version".into());
    }
    let checks = obj["checks"].as_array().ok_or("'checks' is not an array")?;
    if checks.is_empty() {
        return Err("'checks' is empty".into());
    }
    let mut prev: Option<&str> = None;
    for c in checks {
        let name = c["name"].as_str().ok_or("check without a name")?;
        if prev.is_some_and(|p| p > name) {
            return Err(format!("checks are not sorted at '{name}'"));
        }
        prev = Some(name);
        if !(c["value"].is_number() || c["value"].is_null()) || !c["tolerance"].is_number() {
            return Err(format!("check '{name}' has a malformed value or tolerance"));
        }
        let pass = c["pass"].as_bool().ok_or_else(|| format!("check '{name}' has no pass flag"))?;
        if !pass && c.get("witness").is_none_or(|w| w.is_null()) {
            return Err(format!("failing check '{name}' carries no witness"));
        }
    }
    serde_json::from_value::<Report>(v.clone()).map_err(|e| e.to_string())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ExperimentSpec {
        ExperimentSpec::new("bl")
    }

    #[test]
    fn empty_reports_are_rejected() {
        assert!(Report::new(&spec(), Value::Null, vec![]).is_err());
    }

    #[test]
    fn json_roundtrips_and_validates() {
        let r = Report::new(
            &spec(),
            json!({"a": 1}),
            vec![Check::at_most("z", 0.5, 1.0), Check::at_most("a", 2.0, 1.0), Check::at_most("inf", f64::INFINITY, 1.0)],
        )
        .unwrap();
        assert_eq!(r.checks[0].name, "a");
        assert!(r.checks[0].witness.is_some());
        let v: Value = serde_json::from_str(&r.to_json()).unwrap();
        validate_json(&v).unwrap();
        let back: Report = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_needs_a_table() {
        let mut r = Report::new(&spec(), Value::Null, vec![Check::at_most("a", 0.0, 1.0)]).unwrap();
        assert!(r.to_csv().is_err());
        r.table = Some(Table { header: vec!["x1".into(), "R1".into()], rows: vec![vec!["0.5".into(), "0".into()]] });
        assert_eq!(r.to_csv().unwrap(), "x1,R1\n0.5,0\n");
    }
}
