use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::adapt::AdaptationRecord;
use crate::error::{Error, Result};

/// Outcome of one (arm, corruption, seed) run. Percentages are in `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub corruption: String,
    pub seed: u64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub mean_steps: f64,
    pub steps_histogram: Vec<usize>,
    /// Share of test samples whose audio mapped to a valid label.
    pub pseudo_validity: f64,
    pub pseudo_used: usize,
    /// Accuracy of the pseudo labels actually used, if any were.
    pub pseudo_accuracy: Option<f64>,
    pub aborted: usize,
    /// Whether any parameter differs from the source checkpoint afterwards.
    pub model_changed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<AdaptationRecord>>,
}

/// Per-seed facts about the source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub seed: u64,
    pub train_accuracy: f64,
    pub clean_test_accuracy: f64,
    pub fingerprint: String,
}

/// Accuracy averaged over seeds; `rows[i][j]` is corruption `i`, arm `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub arms: Vec<String>,
    pub corruptions: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Mean over corruptions per arm.
    pub avg: Vec<f64>,
}

/// Wall-clock facts, kept apart so the rest of a report is reproducible.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub started_unix_secs: u64,
    pub wall_seconds: f64,
    /// Mean adaptation time per sample in milliseconds, by arm.
    pub ms_per_sample: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub complete: bool,
    pub error: Option<String>,
    pub sources: Vec<SourceSummary>,
    pub results: Vec<RunResult>,
    pub table: AccuracyTable,
    pub metadata: Metadata,
}

impl Report {
    /// The report without `metadata`; equal configs and seeds give equal bytes.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("metadata");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean accuracy of `arm` over all corruptions and seeds.
    pub fn mean_accuracy(&self, arm: &str) -> Option<f64> {
        let j = self.table.arms.iter().position(|a| a == arm)?;
        Some(self.table.avg[j])
    }

    /// Per-seed accuracy of `arm`, averaged over corruptions.
    pub fn seed_means(&self, arm: &str) -> Vec<(u64, f64)> {
        let mut by_seed: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in self.results.iter().filter(|r| r.arm == arm) {
            let e = by_seed.entry(r.seed).or_default();
            e.0 += r.accuracy;
            e.1 += 1;
        }
        by_seed.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
    }

    /// Rows are corruptions, columns are arms, last row is the average.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("corruption");
        for a in &self.table.arms {
            out.push(',');
            out.push_str(&csv_field(a));
        }
        out.push('\n');
        for (c, row) in self.table.corruptions.iter().zip(&self.table.rows) {
            out.push_str(&csv_field(c));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out.push_str("Avg.");
        for v in &self.table.avg {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
        out
    }

    /// Writes `report.json` and `accuracy.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("accuracy.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Averages run accuracies over seeds for every (corruption, arm) cell.
/// Cells without results stay at zero.
pub fn build_table(arms: &[String], corruptions: &[String], results: &[RunResult]) -> AccuracyTable {
    let mut rows = vec![vec![0.0; arms.len()]; corruptions.len()];
    let mut counts = vec![vec![0usize; arms.len()]; corruptions.len()];
    for r in results {
        let (Some(i), Some(j)) = (
            corruptions.iter().position(|c| *c == r.corruption),
            arms.iter().position(|a| *a == r.arm),
        ) else {
            continue;
        };
        rows[i][j] += r.accuracy;
        counts[i][j] += 1;
    }
    for (row, cnt) in rows.iter_mut().zip(&counts) {
        for (v, &n) in row.iter_mut().zip(cnt) {
            if n > 0 {
                *v /= n as f64;
            }
        }
    }
    let avg = (0..arms.len())
        .map(|j| {
            if corruptions.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| r[j]).sum::<f64>() / corruptions.len() as f64
            }
        })
        .collect();
    AccuracyTable { arms: arms.to_vec(), corruptions: corruptions.to_vec(), rows, avg }
}
