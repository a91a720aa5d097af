//! Mean Extremal Difference between the best- and worst-scoring candidates,
//! and report rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::PARAMETER_NAMES;
use crate::error::{Error, Result};
use crate::selector::SearchResult;

pub const DEFAULT_K: usize = 10;

/// Mean over `i = 1..k` of `best_i(p) − worst_i(p)`, where `best_i` is the
/// i-th lowest-scoring candidate and `worst_i` the i-th highest.
pub fn med(result: &SearchResult, k: usize, param: &str) -> Result<f64> {
    let idx = PARAMETER_NAMES
        .iter()
        .position(|&n| n == param)
        .ok_or_else(|| Error::InvalidParameter(format!("unknown parameter {param:?}")))?;
    check_k(result, k)?;
    let c = result.candidates();
    let n = c.len();
    let sum: f64 = (0..k)
        .map(|i| c[i].distribution.values()[idx] - c[n - 1 - i].distribution.values()[idx])
        .sum();
    Ok(sum / k as f64)
}

fn check_k(result: &SearchResult, k: usize) -> Result<()> {
    if k == 0 || 2 * k > result.len() {
        return Err(Error::InvalidParameter(format!(
            "k = {k} needs 1 <= k <= {} for {} candidates",
            result.len() / 2,
            result.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedEntry {
    pub parameter: String,
    pub med: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedReport {
    pub k: usize,
    pub entries: Vec<MedEntry>,
    /// Fingerprint of the source search result.
    pub provenance: String,
}

pub fn med_report(result: &SearchResult, k: usize) -> Result<MedReport> {
    check_k(result, k)?;
    let entries = PARAMETER_NAMES
        .iter()
        .map(|&p| {
            Ok(MedEntry {
                parameter: p.to_string(),
                med: med(result, k, p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MedReport {
        k,
        entries,
        provenance: result.fingerprint(),
    })
}

/// One bar of a MED plot.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint<'a> {
    pub parameter: &'a str,
    pub value: f64,
    /// -1, 0 or +1.
    pub sign: i8,
}

impl MedReport {
    pub fn get(&self, parameter: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.parameter == parameter)
            .map(|e| e.med)
    }

    pub fn plot_series(&self) -> Vec<PlotPoint<'_>> {
        self.entries
            .iter()
            .map(|e| PlotPoint {
                parameter: &e.parameter,
                value: e.med,
                sign: if e.med > 0.0 {
                    1
                } else if e.med < 0.0 {
                    -1
                } else {
                    0
                },
            })
            .collect()
    }

    pub fn from_records(text: &str) -> Result<(Self, Option<serde_json::Value>)> {
        let mut header = None;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: MedRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            match rec {
                MedRecord::MedHeader { k, provenance, run } => header = Some((k, provenance, run)),
                MedRecord::Med(e) => entries.push(e),
            }
        }
        let (k, provenance, run) =
            header.ok_or_else(|| Error::Format("MED report has no header record".into()))?;
        Ok((
            MedReport {
                k,
                entries,
                provenance,
            },
            run,
        ))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum MedRecord {
    MedHeader {
        k: usize,
        provenance: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        run: Option<serde_json::Value>,
    },
    Med(MedEntry),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Aligned, human-readable columns.
    TableText,
    /// Comma-separated with a header line.
    DelimitedColumns,
    /// Line-delimited JSON with a header record.
    StructuredRecords,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::TableText => "txt",
            ReportFormat::DelimitedColumns => "csv",
            ReportFormat::StructuredRecords => "jsonl",
        }
    }
}

/// Anything [`emit_report`] can write.
pub trait Report {
    /// `run` is embedded where the format has room for it (text and
    /// structured records); delimited columns stay plain.
    fn render(&self, format: ReportFormat, run: Option<&serde_json::Value>) -> String;
}

impl Report for MedReport {
    fn render(&self, format: ReportFormat, run: Option<&serde_json::Value>) -> String {
        let mut out = String::new();
        match format {
            ReportFormat::TableText => {
                let _ = writeln!(out, "# Mean Extremal Difference, k = {}", self.k);
                let _ = writeln!(out, "# source {}", self.provenance);
                if let Some(run) = run {
                    let _ = writeln!(out, "# run {run}");
                }
                let width = self
                    .entries
                    .iter()
                    .map(|e| e.parameter.len())
                    .max()
                    .unwrap_or(9)
                    .max(9);
                let _ = writeln!(out, "{:<width$}  {:>12}", "parameter", "med");
                for e in &self.entries {
                    let _ = writeln!(out, "{:<width$}  {:>12.6}", e.parameter, e.med);
                }
            }
            ReportFormat::DelimitedColumns => {
                out.push_str("parameter,med\n");
                for e in &self.entries {
                    let _ = writeln!(out, "{},{}", e.parameter, e.med);
                }
            }
            ReportFormat::StructuredRecords => {
                let header = MedRecord::MedHeader {
                    k: self.k,
                    provenance: self.provenance.clone(),
                    run: run.cloned(),
                };
                out.push_str(&serde_json::to_string(&header).expect("serializes"));
                out.push('\n');
                for e in &self.entries {
                    out.push_str(&serde_json::to_string(&MedRecord::Med(e.clone())).expect("serializes"));
                    out.push('\n');
                }
            }
        }
        out
    }
}

impl Report for SearchResult {
    fn render(&self, format: ReportFormat, run: Option<&serde_json::Value>) -> String {
        match format {
            ReportFormat::StructuredRecords => self.to_records(run),
            ReportFormat::DelimitedColumns => {
                let mut out = format!("rank,index,seed,score,{}\n", PARAMETER_NAMES.join(","));
                for (rank, c) in self.candidates().iter().enumerate() {
                    let _ = write!(out, "{rank},{},{},{}", c.index, c.seed, c.score.value);
                    for v in c.distribution.values() {
                        let _ = write!(out, ",{v}");
                    }
                    out.push('\n');
                }
                out
            }
            ReportFormat::TableText => {
                let cfg = self.config();
                let mut out = format!(
                    "# {} candidates, master seed {}, N = {}, epsilon = {}, max origins = {}\n",
                    cfg.n_candidates,
                    cfg.master_seed,
                    cfg.scoring.n_views,
                    cfg.scoring.epsilon,
                    cfg.scoring.max_origins
                );
                if let Some(run) = run {
                    let _ = writeln!(out, "# run {run}");
                }
                let _ = write!(out, "{:>4} {:>5} {:>14}", "rank", "index", "score");
                for p in PARAMETER_NAMES {
                    let _ = write!(out, " {p:>14}");
                }
                out.push('\n');
                for (rank, c) in self.candidates().iter().enumerate() {
                    let _ = write!(out, "{rank:>4} {:>5} {:>14.6e}", c.index, c.score.value);
                    for v in c.distribution.values() {
                        let _ = write!(out, " {v:>14.4}");
                    }
                    out.push('\n');
                }
                out
            }
        }
    }
}

pub fn emit_report(
    report: &dyn Report,
    format: ReportFormat,
    path: impl AsRef<Path>,
    run: Option<&serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report.render(format, run)).map_err(|e| Error::io(path, e))
}
