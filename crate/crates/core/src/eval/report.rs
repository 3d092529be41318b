use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ProbeResult;
use crate::error::{Error, Result};

/// Published schema of the JSON report.
pub const REPORT_SCHEMA: &str = include_str!("../../../../docs/report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub variant: String,
    pub seed: u64,
    pub acc1: f64,
    pub acc5: f64,
}

/// Per-variant mean over seeds, next to externally reported numbers when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub mean_acc1: f64,
    pub mean_acc5: f64,
    pub reference_acc1: Option<f64>,
    pub reference_acc5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    /// Where the reference columns come from.
    pub reference_note: Option<String>,
}

impl Report {
    /// Rows in input order; summary rows in order of first appearance.
    pub fn from_results(results: &[ProbeResult]) -> Self {
        let rows: Vec<ReportRow> = results
            .iter()
            .map(|r| ReportRow {
                variant: r.variant.clone(),
                seed: r.seed,
                acc1: r.acc_at_1,
                acc5: r.acc_at_5,
            })
            .collect();
        let mut order: Vec<&str> = Vec::new();
        for r in &rows {
            if !order.contains(&r.variant.as_str()) {
                order.push(&r.variant);
            }
        }
        let summary = order
            .iter()
            .map(|v| {
                let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.variant == *v).collect();
                let n = mine.len() as f64;
                SummaryRow {
                    variant: v.to_string(),
                    seeds: mine.len(),
                    mean_acc1: mine.iter().map(|r| r.acc1).sum::<f64>() / n,
                    mean_acc5: mine.iter().map(|r| r.acc5).sum::<f64>() / n,
                    reference_acc1: None,
                    reference_acc5: None,
                }
            })
            .collect();
        Self {
            rows,
            summary,
            reference_note: None,
        }
    }

    pub fn mean_acc1(&self, variant: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.mean_acc1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,acc1,acc5\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.6},{:.6}", r.variant, r.seed, r.acc1, r.acc5).expect("string write");
        }
        out
    }

    /// Side-by-side table of toy means and reference numbers.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(note) = &self.reference_note {
            writeln!(out, "# reference: {note}").expect("string write");
        }
        writeln!(out, "{:<18} {:>5} {:>9} {:>9} {:>9} {:>9}", "variant", "seeds", "toy@1", "toy@5", "ref@1", "ref@5")
            .expect("string write");
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        for s in &self.summary {
            writeln!(
                out,
                "{:<18} {:>5} {:>9.1} {:>9.1} {:>9} {:>9}",
                s.variant,
                s.seeds,
                100.0 * s.mean_acc1,
                100.0 * s.mean_acc5,
                fmt(s.reference_acc1),
                fmt(s.reference_acc5)
            )
            .expect("string write");
        }
        out
    }
}

fn check_report_schema(doc: &serde_json::Value) -> Result<()> {
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).expect("report schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("report schema compiles");
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| e.to_string()).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("report does not match the schema: {}", errors.join("; "))))
    }
}

/// Write `report.csv` and `report.json` into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let doc = serde_json::to_value(report)?;
    check_report_schema(&doc)?;
    let csv = dir.join("report.csv");
    let json = dir.join("report.json");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(format!("writing {}", csv.display()), e))?;
    std::fs::write(&json, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(format!("writing {}", json.display()), e))?;
    Ok((csv, json))
}

/// Read a JSON report back, validating it against the schema.
pub fn read_report(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    check_report_schema(&doc)?;
    Ok(serde_json::from_value(doc)?)
}
