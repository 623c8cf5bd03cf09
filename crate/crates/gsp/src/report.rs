//! Files written by the commands: per-run CSV rows, `report.json`, and the
//! comparison table built from several run directories.

use std::fs;
use std::path::{Path, PathBuf};

use gsp_core::downstream::{aggregate_runs, RunSummary};
use gsp_core::optim::Method;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::runner::SeedRun;

pub const RESULTS_HEADER: [&str; 9] = [
    "method",
    "lambda",
    "k",
    "seed",
    "accuracy",
    "nnz",
    "zero_rows",
    "epochs_best",
    "wall_ms",
];

pub const SWEEP_HEADER: [&str; 10] = [
    "method",
    "lambda",
    "k",
    "seed",
    "val_accuracy",
    "accuracy",
    "nnz",
    "zero_rows",
    "epochs_best",
    "wall_ms",
];

pub const COMPARISON_HEADER: [&str; 8] = [
    "run",
    "method",
    "lambda",
    "k",
    "accuracy",
    "val_accuracy",
    "zero_fraction",
    "runs",
];

/// One line of `results.csv`. Empty cells mark values that do not apply to
/// the method (no penalty, no basis, no prompt) or an empty test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub nnz: Option<usize>,
    pub zero_rows: Option<usize>,
    pub epochs_best: usize,
    pub wall_ms: u64,
}

impl From<&SeedRun> for ResultRow {
    fn from(r: &SeedRun) -> Self {
        Self {
            method: r.method,
            lambda: r.lambda,
            k: r.k,
            seed: r.seed,
            accuracy: r.test_accuracy,
            nnz: r.sparsity.as_ref().map(|s| s.nnz),
            zero_rows: r.sparsity.as_ref().and_then(|s| s.zero_rows),
            epochs_best: r.best_epoch,
            wall_ms: r.wall_ms,
        }
    }
}

/// One line of `sweep.csv`: a results row plus the validation accuracy used
/// to pick λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub seed: u64,
    pub val_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub nnz: Option<usize>,
    pub zero_rows: Option<usize>,
    pub epochs_best: usize,
    pub wall_ms: u64,
}

impl From<&SeedRun> for SweepRow {
    fn from(r: &SeedRun) -> Self {
        let base = ResultRow::from(r);
        Self {
            method: base.method,
            lambda: base.lambda,
            k: base.k,
            seed: base.seed,
            val_accuracy: r.val_accuracy,
            accuracy: base.accuracy,
            nnz: base.nnz,
            zero_rows: base.zero_rows,
            epochs_best: base.epochs_best,
            wall_ms: base.wall_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    /// `"mean ± std"` in percent.
    pub cell: String,
}

impl From<RunSummary> for Aggregate {
    fn from(s: RunSummary) -> Self {
        Self {
            mean: s.mean,
            std: s.std,
            runs: s.runs,
            cell: s.percent_cell(),
        }
    }
}

/// Mean ± std of the present values; `None` if there are none.
pub fn aggregate(values: impl IntoIterator<Item = Option<f64>>) -> Option<Aggregate> {
    let values: Vec<f64> = values.into_iter().flatten().collect();
    aggregate_runs(&values).ok().map(Aggregate::from)
}

/// Summary of one λ value in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridPoint {
    pub lambda: f64,
    pub val_accuracy: Option<Aggregate>,
    pub test_accuracy: Option<Aggregate>,
    /// Mean fraction of prompt dimensions that are exactly zero.
    pub zero_fraction: Option<f64>,
    /// Mean zero-row count of `P` (basis prompts only).
    pub zero_rows: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub command: String,
    pub method: Method,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    /// Test accuracy over seeds.
    pub accuracy: Option<Aggregate>,
    pub val_accuracy: Option<Aggregate>,
    /// λ picked by validation accuracy (sweeps only).
    pub chosen_lambda: Option<f64>,
    pub sweep: Option<Vec<GridPoint>>,
    pub runs: Vec<SeedRun>,
    pub config: RunConfig,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }
}

pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    w.write_record(header).map_err(|e| CliError::io(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a CSV written by [`write_csv`], checking its header line against `header`.
pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<R>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let found = r
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(CliError::Input(format!(
            "{}: header {:?} does not match schema {:?}",
            path.display(),
            found.iter().collect::<Vec<_>>(),
            header
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| CliError::Input(format!("{}: {e}", path.display()))))
        .collect()
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub method: Method,
    pub lambda: Option<f64>,
    pub k: Option<usize>,
    pub accuracy: String,
    pub val_accuracy: String,
    pub zero_fraction: Option<f64>,
    pub runs: usize,
}

/// Summarizes each directory's `report.json`. Cells are recomputed from the
/// per-seed accuracies.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>, CliError> {
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let report = RunReport::load(dir)?;
        let runs: Vec<&SeedRun> = match report.chosen_lambda {
            Some(l) => report.runs.iter().filter(|r| r.lambda == Some(l)).collect(),
            None => report.runs.iter().collect(),
        };
        let cell = |a: Option<Aggregate>| a.map_or_else(String::new, |a| a.cell);
        let fractions: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.sparsity.as_ref().map(|s| s.zero_fraction()))
            .collect();
        rows.push(ComparisonRow {
            run: dir
                .file_name()
                .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
            method: report.method,
            lambda: report.chosen_lambda.or(report.lambda),
            k: report.k,
            accuracy: cell(aggregate(runs.iter().map(|r| r.test_accuracy))),
            val_accuracy: cell(aggregate(runs.iter().map(|r| r.val_accuracy))),
            zero_fraction: (!fractions.is_empty()).then(|| fractions.iter().sum::<f64>() / fractions.len() as f64),
            runs: runs.len(),
        });
    }
    Ok(rows)
}

/// Fixed-width text rendering of the comparison table.
pub fn aligned_table(rows: &[ComparisonRow]) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    let cells: Vec<Vec<String>> = std::iter::once(COMPARISON_HEADER.iter().map(|s| s.to_string()).collect())
        .chain(rows.iter().map(|r| {
            vec![
                r.run.clone(),
                r.method.to_string(),
                opt(r.lambda.map(|l| l.to_string())),
                opt(r.k.map(|k| k.to_string())),
                if r.accuracy.is_empty() { "-".into() } else { r.accuracy.clone() },
                if r.val_accuracy.is_empty() { "-".into() } else { r.val_accuracy.clone() },
                opt(r.zero_fraction.map(|z| format!("{:.3}", z))),
                r.runs.to_string(),
            ]
        }))
        .collect();
    let widths: Vec<usize> = (0..COMPARISON_HEADER.len())
        .map(|c| cells.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
