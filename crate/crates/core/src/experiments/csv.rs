//! CSV histories and summaries.
//!
//! Every file starts with `#` comment lines of `key=value` metadata, then a
//! header row. Floats use Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str =
    "epoch,train_loss,train_error,test_error,bound_proxy,mean_log_z,mean_d_gap";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: f64,
    pub bound_proxy: f64,
    pub mean_log_z: f64,
    pub mean_d_gap: f64,
}

impl EpochRecord {
    /// `bound_proxy` is the mean true-label energy.
    pub fn mean_energy(&self) -> f64 {
        self.bound_proxy
    }
}

pub fn metadata_block(meta: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        for (i, line) in v.lines().enumerate() {
            if i == 0 {
                let _ = writeln!(out, "# {k}={line}");
            } else {
                let _ = writeln!(out, "#   {line}");
            }
        }
    }
    out
}

pub fn format_history(meta: &[(String, String)], records: &[EpochRecord]) -> String {
    let mut out = metadata_block(meta);
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.train_error,
            r.test_error,
            r.bound_proxy,
            r.mean_log_z,
            r.mean_d_gap
        );
    }
    out
}

/// A generic numeric table with its header and metadata comments.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub meta: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            meta: Vec::new(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut meta = Vec::new();
        let mut header: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                meta.push(c.trim().to_string());
                continue;
            }
            match &header {
                None => header = Some(line.split(',').map(|s| s.trim().to_string()).collect()),
                Some(h) => {
                    let row = line
                        .split(',')
                        .map(|s| s.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::Config {
                            line: i + 1,
                            message: format!("non-numeric CSV row `{line}`"),
                        })?;
                    if row.len() != h.len() {
                        return Err(Error::Config {
                            line: i + 1,
                            message: format!("expected {} fields, found {}", h.len(), row.len()),
                        });
                    }
                    rows.push(row);
                }
            }
        }
        Ok(Self {
            meta,
            header: header.ok_or(Error::Empty("CSV header"))?,
            rows,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_csv(&self, meta: &[(String, String)]) -> String {
        let mut out = metadata_block(meta);
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// One machine-readable pass/fail assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// `None` for checks aggregated over seeds.
    pub seed: Option<u64>,
    pub value: String,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, seed: Option<u64>, value: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            seed,
            value: value.into(),
            pass,
        }
    }

    pub fn status(&self) -> &'static str {
        if self.pass {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

pub fn format_summary(meta: &[(String, String)], checks: &[Check]) -> String {
    let mut out = metadata_block(meta);
    out.push_str("check,seed,value,status\n");
    for c in checks {
        let seed = c.seed.map_or_else(|| "all".to_string(), |s| s.to_string());
        let value = c.value.replace(',', ";");
        let _ = writeln!(out, "{},{},{},{}", c.name, seed, value, c.status());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_round_trips_through_table() {
        let rec = EpochRecord {
            epoch: 3,
            train_loss: 0.1,
            train_error: 0.0,
            test_error: 0.25,
            bound_proxy: -4.5,
            mean_log_z: 4.6,
            mean_d_gap: -1e-3,
        };
        let text = format_history(&[("seed".into(), "7".into())], &[rec]);
        assert!(text.starts_with("# seed=7\nepoch,train_loss"));
        let t = Table::parse(&text).unwrap();
        assert_eq!(t.meta, vec!["seed=7"]);
        assert_eq!(t.column("test_error").unwrap(), vec![0.25]);
        assert!(matches!(t.column("nope"), Err(Error::MissingColumn(c)) if c == "nope"));
    }

    #[test]
    fn multiline_metadata_stays_commented() {
        let block = metadata_block(&[("config".into(), "a = 1\nb = 2".into())]);
        assert_eq!(block, "# config=a = 1\n#   b = 2\n");
    }

    #[test]
    fn summary_rows() {
        let s = format_summary(
            &[],
            &[Check::new("x", Some(1), "1,2", true), Check::new("y", None, "0", false)],
        );
        assert_eq!(s, "check,seed,value,status\nx,1,1;2,PASS\ny,all,0,FAIL\n");
    }
}
