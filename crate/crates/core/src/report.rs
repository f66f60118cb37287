//! Run aggregation and SVG line plots.
//!
//! Plots are reports, not a UI: polylines and axis primitives written by
//! hand, no plotting dependency. Aggregates reproduce the usual
//! train / test / train-test table layout, one row per (method, lambda),
//! averaged over seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::train::{EvalRow, Regularizer, RunRecord};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: String },
    #[error("{path}: {err}")]
    Parse { path: PathBuf, err: String },
    #[error("no run summaries found under {0}")]
    Empty(PathBuf),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ReportError {
    ReportError::Io { path: path.to_path_buf(), err: e.to_string() }
}

/// Slim per-run summary written next to the metric CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Regularizer,
    pub lambda: f64,
    pub seed: u64,
    pub iterations: usize,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_gap: f64,
    pub conditional_skips: usize,
    pub wall_seconds: f64,
    /// File name of the per-iteration CSV, relative to the summary.
    pub rows_csv: String,
}

impl RunRecord {
    pub fn summary(&self, rows_csv: &str) -> RunSummary {
        RunSummary {
            method: self.config.method,
            lambda: self.config.lambda,
            seed: self.config.seed,
            iterations: self.config.iterations,
            final_train_accuracy: self.final_train_accuracy,
            final_test_accuracy: self.final_test_accuracy,
            final_gap: self.final_gap,
            conditional_skips: self.conditional_skips,
            wall_seconds: self.wall_seconds,
            rows_csv: rows_csv.to_string(),
        }
    }
}

/// Base name (no extension) for one run's artifacts.
pub fn run_stem(method: Regularizer, lambda: f64, seed: u64) -> String {
    format!("run_{method}_l{lambda}_s{seed}")
}

/// Write `<stem>.csv` and `<stem>.json` for a finished run.
pub fn write_run(record: &RunRecord, out_dir: &Path) -> Result<RunSummary, ReportError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let stem = run_stem(record.config.method, record.config.lambda, record.config.seed);
    let csv_name = format!("{stem}.csv");
    let csv_path = out_dir.join(&csv_name);
    fs::write(&csv_path, record.rows_to_csv()).map_err(|e| io_err(&csv_path, e))?;
    let summary = record.summary(&csv_name);
    let json_path = out_dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| ReportError::Parse { path: json_path.clone(), err: e.to_string() })?;
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
    Ok(summary)
}

/// A run read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub summary: RunSummary,
    pub rows: Vec<EvalRow>,
}

/// Read every `run_*.json` summary (and its CSV) under a directory,
/// sorted by (method, lambda, seed) for stable output.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>, ReportError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_"))
        })
        .collect();
    paths.sort();
    let mut runs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let summary: RunSummary = serde_json::from_str(&text)
            .map_err(|e| ReportError::Parse { path: path.clone(), err: e.to_string() })?;
        let csv_path = dir.join(&summary.rows_csv);
        let rows = read_rows_csv(&csv_path)?;
        runs.push(LoadedRun { summary, rows });
    }
    if runs.is_empty() {
        return Err(ReportError::Empty(dir.to_path_buf()));
    }
    runs.sort_by(|a, b| {
        (a.summary.method.to_string(), a.summary.lambda.to_bits(), a.summary.seed).cmp(&(
            b.summary.method.to_string(),
            b.summary.lambda.to_bits(),
            b.summary.seed,
        ))
    });
    Ok(runs)
}

fn read_rows_csv(path: &Path) -> Result<Vec<EvalRow>, ReportError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| ReportError::Parse { path: path.to_path_buf(), err: e.to_string() })?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        let row: EvalRow =
            record.map_err(|e| ReportError::Parse { path: path.to_path_buf(), err: e.to_string() })?;
        rows.push(row);
    }
    Ok(rows)
}

/// One aggregate table row: means over seeds for a (method, lambda) cell.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub method: String,
    pub lambda: f64,
    pub runs: usize,
    pub train_mean: f64,
    pub test_mean: f64,
    pub gap_mean: f64,
}

/// Group runs by (method, lambda) and average the final accuracies.
pub fn aggregate(runs: &[LoadedRun]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, u64), Vec<&RunSummary>> = BTreeMap::new();
    for run in runs {
        groups
            .entry((run.summary.method.to_string(), run.summary.lambda.to_bits()))
            .or_default()
            .push(&run.summary);
    }
    groups
        .into_iter()
        .map(|((method, lambda_bits), members)| {
            let n = members.len() as f64;
            AggregateRow {
                method,
                lambda: f64::from_bits(lambda_bits),
                runs: members.len(),
                train_mean: members.iter().map(|s| s.final_train_accuracy).sum::<f64>() / n,
                test_mean: members.iter().map(|s| s.final_test_accuracy).sum::<f64>() / n,
                gap_mean: members.iter().map(|s| s.final_gap).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Aggregate table as CSV, sorted by (method, lambda).
pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("method,lambda,runs,train_mean,test_mean,gap_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.lambda, r.runs, r.train_mean, r.test_mean, r.gap_mean
        ));
    }
    out
}

/// Mean metric trajectory per (method, lambda) across seeds, keyed rows by
/// iteration; series sorted by key for stable rendering.
pub fn mean_series(runs: &[LoadedRun], metric: fn(&EvalRow) -> f64) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut groups: BTreeMap<(String, u64), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for run in runs {
        let key = (run.summary.method.to_string(), run.summary.lambda.to_bits());
        let series = groups.entry(key).or_default();
        for row in &run.rows {
            let slot = series.entry(row.iteration).or_insert((0.0, 0));
            slot.0 += metric(row);
            slot.1 += 1;
        }
    }
    groups
        .into_iter()
        .map(|((method, lambda_bits), series)| {
            let label = format!("{method} (lambda={})", f64::from_bits(lambda_bits));
            let points = series
                .into_iter()
                .map(|(it, (sum, count))| (it as f64, sum / count as f64))
                .collect();
            (label, points)
        })
        .collect()
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"];

/// Render labeled series as an SVG line plot.
pub fn render_line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (width, height) = (720.0, 440.0);
    let (ml, mr, mt, mb) = (64.0, 160.0, 40.0, 48.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = move |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = move |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        ml + pw / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    // ticks
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
        let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.4}</text>\n",
            sx(fx),
            mt + ph + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.4}</text>\n",
            ml - 6.0,
            sy(fy) + 4.0,
            fy
        ));
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            sy(fy),
            ml + pw,
            sy(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        ml + pw / 2.0,
        height - 10.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        mt + ph / 2.0,
        mt + ph / 2.0,
        y_label
    ));
    // series
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        let ly = mt + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            ml + pw + 8.0,
            ml + pw + 28.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            ml + pw + 32.0,
            ly + 4.0,
            label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
