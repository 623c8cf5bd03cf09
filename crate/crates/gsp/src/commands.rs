//! The four subcommands. Each writes its files under the configured output
//! directory and returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gsp_core::optim::Method;
use gsp_core::pretrain::pretrain_dataset;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::{
    aggregate, aligned_table, compare, write_csv, Aggregate, ComparisonRow, GridPoint, ResultRow, RunReport,
    SweepRow, COMPARISON_HEADER, RESULTS_HEADER, SWEEP_HEADER,
};
use crate::runner::{run_grid, thread_pool, Prepared, SeedRun};
use crate::svg::{Chart, Series};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Pre-trains a backbone on the configured dataset and writes `backbone.json`.
pub fn pretrain(config: &RunConfig) -> Result<PathBuf, CliError> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let outcome = pretrain_dataset(&dataset, &config.pretrain).map_err(CliError::from_pretrain)?;
    ensure_dir(&config.out)?;
    let path = config.out.join("backbone.json");
    outcome
        .backbone
        .save_weights(&path)
        .map_err(|e| CliError::io(&path, e))?;
    if config.plots {
        let chart = Chart {
            title: "EdgePred pre-training".into(),
            x_label: "epoch".into(),
            y_label: "BCE loss".into(),
            x_ticks: None,
            series: vec![Series {
                label: "loss".into(),
                points: outcome.losses.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect(),
            }],
        };
        write_text(&config.out.join("pretrain_loss.svg"), &chart.render())?;
    }
    Ok(path)
}

/// Objective curves, one series per run.
pub fn loss_chart(title: &str, runs: &[SeedRun]) -> Chart {
    Chart {
        title: title.into(),
        x_label: "epoch".into(),
        y_label: "objective".into(),
        x_ticks: None,
        series: runs
            .iter()
            .map(|r| Series {
                label: format!("seed {}", r.seed),
                points: r
                    .trace
                    .records
                    .iter()
                    .map(|e| (e.epoch as f64, e.objective))
                    .collect(),
            })
            .collect(),
    }
}

fn summarize(
    command: &str,
    config: &RunConfig,
    runs: Vec<SeedRun>,
    chosen_lambda: Option<f64>,
    sweep: Option<Vec<GridPoint>>,
    start: Instant,
) -> RunReport {
    let scored: Vec<&SeedRun> = match chosen_lambda {
        Some(l) => runs.iter().filter(|r| r.lambda == Some(l)).collect(),
        None => runs.iter().collect(),
    };
    RunReport {
        command: command.into(),
        method: config.method,
        lambda: config.method.is_sparse().then(|| chosen_lambda.or(config.lambda).unwrap_or(0.0)),
        k: config.method.uses_basis().then(|| config.basis_count()),
        accuracy: aggregate(scored.iter().map(|r| r.test_accuracy)),
        val_accuracy: aggregate(scored.iter().map(|r| r.val_accuracy)),
        chosen_lambda,
        sweep,
        runs,
        config: config.clone(),
        wall_ms: start.elapsed().as_millis() as u64,
    }
}

/// Tunes the configured method once per seed. Writes `results.csv`,
/// `report.json` and, with plots enabled, `loss_curve.svg`.
pub fn tune(config: &RunConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    config.validate()?;
    let pool = thread_pool()?;
    let prepared = Prepared::load(config)?;
    let lambda = config.lambda.unwrap_or(0.0);
    let runs = run_grid(&prepared, config, config.method, &[lambda], &pool)?;

    ensure_dir(&config.out)?;
    let rows: Vec<ResultRow> = runs.iter().map(ResultRow::from).collect();
    write_csv(&config.out.join("results.csv"), &RESULTS_HEADER, &rows)?;
    if config.plots {
        let chart = loss_chart(&format!("{} objective", config.method), &runs);
        write_text(&config.out.join("loss_curve.svg"), &chart.render())?;
    }
    let report = summarize("tune", config, runs, None, None, start);
    report.save(&config.out)?;
    Ok(report)
}

/// Index of the grid point with the highest mean validation accuracy; ties
/// go to the earlier (smaller) λ. Points with no validation items rank last.
pub fn best_grid_index(val_means: &[Option<f64>]) -> usize {
    let mut best = 0;
    for (i, v) in val_means.iter().enumerate() {
        let better = match (v, val_means[best]) {
            (Some(v), Some(b)) => *v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if better {
            best = i;
        }
    }
    best
}

/// Tunes every λ of the grid for every seed and picks λ by validation
/// accuracy. Writes `sweep.csv`, `results.csv` for the chosen λ,
/// `report.json` and `sweep.svg`.
pub fn sweep(config: &RunConfig) -> Result<RunReport, CliError> {
    let start = Instant::now();
    config.validate()?;
    if !config.method.is_sparse() {
        return Err(CliError::Config(format!(
            "sweep needs a penalized method (gsfp or gsmfp), not {}",
            config.method
        )));
    }
    let grid = config.grid();
    let pool = thread_pool()?;
    let prepared = Prepared::load(config)?;
    let runs = run_grid(&prepared, config, config.method, &grid, &pool)?;

    let points: Vec<GridPoint> = grid
        .iter()
        .map(|&lambda| {
            let at: Vec<&SeedRun> = runs.iter().filter(|r| r.lambda == Some(lambda)).collect();
            let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            GridPoint {
                lambda,
                val_accuracy: aggregate(at.iter().map(|r| r.val_accuracy)),
                test_accuracy: aggregate(at.iter().map(|r| r.test_accuracy)),
                zero_fraction: mean(
                    at.iter()
                        .filter_map(|r| r.sparsity.as_ref().map(|s| s.zero_fraction()))
                        .collect(),
                ),
                zero_rows: mean(
                    at.iter()
                        .filter_map(|r| r.sparsity.as_ref().and_then(|s| s.zero_rows))
                        .map(|z| z as f64)
                        .collect(),
                ),
            }
        })
        .collect();
    let best = best_grid_index(
        &points
            .iter()
            .map(|p| p.val_accuracy.as_ref().map(|a: &Aggregate| a.mean))
            .collect::<Vec<_>>(),
    );
    let chosen = grid[best];

    ensure_dir(&config.out)?;
    let sweep_rows: Vec<SweepRow> = runs.iter().map(SweepRow::from).collect();
    write_csv(&config.out.join("sweep.csv"), &SWEEP_HEADER, &sweep_rows)?;
    let best_rows: Vec<ResultRow> = runs
        .iter()
        .filter(|r| r.lambda == Some(chosen))
        .map(ResultRow::from)
        .collect();
    write_csv(&config.out.join("results.csv"), &RESULTS_HEADER, &best_rows)?;
    write_text(&config.out.join("sweep.svg"), &sweep_chart(config.method, &points).render())?;
    if config.plots {
        let at_best: Vec<SeedRun> = runs.iter().filter(|r| r.lambda == Some(chosen)).cloned().collect();
        let chart = loss_chart(&format!("{} objective, lambda {chosen}", config.method), &at_best);
        write_text(&config.out.join("loss_curve.svg"), &chart.render())?;
    }
    let report = summarize("sweep", config, runs, Some(chosen), Some(points), start);
    report.save(&config.out)?;
    Ok(report)
}

/// Accuracy and sparsity against λ on a categorical axis.
pub fn sweep_chart(method: Method, points: &[GridPoint]) -> Chart {
    let series = |label: &str, f: &dyn Fn(&GridPoint) -> Option<f64>| Series {
        label: label.into(),
        points: points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| f(p).map(|v| (i as f64, v)))
            .collect(),
    };
    Chart {
        title: format!("{method}: accuracy and sparsity vs lambda"),
        x_label: "lambda".into(),
        y_label: "fraction".into(),
        x_ticks: Some(points.iter().map(|p| p.lambda.to_string()).collect()),
        series: vec![
            series("val accuracy", &|p| p.val_accuracy.as_ref().map(|a| a.mean)),
            series("test accuracy", &|p| p.test_accuracy.as_ref().map(|a| a.mean)),
            series("zero fraction", &|p| p.zero_fraction),
        ],
    }
}

/// Builds the comparison table of several run directories. Writes
/// `comparison.csv` and `comparison.txt` under `out` and returns the text.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<(Vec<ComparisonRow>, String), CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let rows = compare(dirs)?;
    let text = aligned_table(&rows);
    ensure_dir(out)?;
    write_csv(&out.join("comparison.csv"), &COMPARISON_HEADER, &rows)?;
    write_text(&out.join("comparison.txt"), &text)?;
    Ok((rows, text))
}
