//! Report rows and their CSV / json-lines encodings.
//!
//! Numbers are written with 17 significant digits so that identical runs
//! produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::CheckKind;
use crate::RunError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Unconverged,
    Fail,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Unconverged => "unconverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub check: CheckKind,
    pub item: String,
    pub s: Option<f64>,
    pub t: Option<f64>,
    pub k: Option<usize>,
    pub value: f64,
    pub tolerance: Option<f64>,
    pub status: Status,
}

impl Row {
    pub fn new(check: CheckKind, item: impl Into<String>, value: f64) -> Self {
        Self {
            check,
            item: item.into(),
            s: None,
            t: None,
            k: None,
            value,
            tolerance: None,
            status: Status::Pass,
        }
    }

    pub fn s(mut self, s: f64) -> Self {
        self.s = Some(s);
        self
    }

    pub fn t(mut self, t: f64) -> Self {
        self.t = Some(t);
        self
    }

    pub fn k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    /// Passes when `value >= −tol`.
    pub fn at_least(mut self, tol: f64) -> Self {
        self.tolerance = Some(tol);
        self.status = if self.value >= -tol { Status::Pass } else { Status::Fail };
        self
    }

    /// Passes when `value <= tol`.
    pub fn at_most(mut self, tol: f64) -> Self {
        self.tolerance = Some(tol);
        self.status = if self.value <= tol { Status::Pass } else { Status::Fail };
        self
    }

    pub fn status(mut self, status: Status) -> Self {
        self.status = status;
        self
    }
}

pub const REPORT_HEADER: &str = "check,item,s,t,k,value,tolerance,status";

pub fn number(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(number).unwrap_or_default()
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(rows: &[Row]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.check,
            field(&r.item),
            opt(r.s),
            opt(r.t),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            number(r.value),
            opt(r.tolerance),
            r.status.name()
        );
    }
    out
}

pub fn report_json_lines(rows: &[Row]) -> String {
    let mut out = String::new();
    for r in rows {
        let v = serde_json::json!({
            "check": r.check.name(),
            "item": r.item,
            "s": r.s.map(number),
            "t": r.t.map(number),
            "k": r.k,
            "value": number(r.value),
            "tolerance": r.tolerance.map(number),
            "status": r.status.name(),
        });
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

/// A table with a fixed header, written as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    JsonLines,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json-lines" => Ok(Format::JsonLines),
            other => Err(format!("unknown format '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<Row>,
    /// `t, lambda_prime, alpha_prime, lambda_int, alpha_int, samples_used` (and
    /// `chi, chi_stderr, sigma_min` for φ⁴).
    pub schedule: Table,
    /// `t, mu_0 … mu_k, converged`.
    pub spectrum: Table,
    pub config_echo: String,
    pub seed: Option<u64>,
    pub version: &'static str,
}

impl RunReport {
    /// Worst status over all rows; `Pass` for an empty report.
    pub fn status(&self) -> Status {
        self.rows.iter().map(|r| r.status).max().unwrap_or(Status::Pass)
    }

    pub fn count(&self, status: Status) -> usize {
        self.rows.iter().filter(|r| r.status == status).count()
    }

    /// Writes the report files into `dir`, returning their paths.
    pub fn write(&self, dir: &Path, format: Format) -> Result<Vec<PathBuf>, RunError> {
        fs::create_dir_all(dir).map_err(|e| RunError::Write {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut files = vec![match format {
            Format::Csv => ("report.csv", report_csv(&self.rows)),
            Format::JsonLines => ("report.jsonl", report_json_lines(&self.rows)),
        }];
        if !self.schedule.is_empty() {
            files.push(("schedule.csv", self.schedule.to_csv()));
        }
        if !self.spectrum.is_empty() {
            files.push(("spectrum.csv", self.spectrum.to_csv()));
        }
        files.push(("config.toml", self.config_echo.clone()));
        let summary = serde_json::json!({
            "version": self.version,
            "seed": self.seed,
            "status": self.status().name(),
            "pass": self.count(Status::Pass),
            "fail": self.count(Status::Fail),
            "unconverged": self.count(Status::Unconverged),
        });
        files.push(("summary.json", format!("{summary:#}\n")));
        let mut paths = Vec::new();
        for (name, text) in files {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| RunError::Write {
                path: path.clone(),
                message: e.to_string(),
            })?;
            paths.push(path);
        }
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(report_csv(&[]), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn rows_print_seventeen_digits_and_blank_options() {
        let r = Row::new(CheckKind::Theorem, "margin", 0.1).s(0.5).t(1.0).at_least(1e-4);
        let csv = report_csv(&[r]);
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(
            line,
            "theorem,margin,5.0000000000000000e-1,1.0000000000000000e0,,1.0000000000000001e-1,1.0000000000000000e-4,pass"
        );
    }

    #[test]
    fn status_is_worst_row() {
        let rows = vec![
            Row::new(CheckKind::Spectrum, "a", 1.0),
            Row::new(CheckKind::Spectrum, "b", 1.0).status(Status::Unconverged),
        ];
        let mut rep = RunReport {
            rows,
            schedule: Table::default(),
            spectrum: Table::default(),
            config_echo: String::new(),
            seed: None,
            version: "0",
        };
        assert_eq!(rep.status(), Status::Unconverged);
        rep.rows.push(Row::new(CheckKind::Theorem, "c", -1.0).at_least(0.0));
        assert_eq!(rep.status(), Status::Fail);
    }

    #[test]
    fn quotes_awkward_items() {
        assert_eq!(field("a,b"), "\"a,b\"");
        assert_eq!(field("plain"), "plain");
    }
}
