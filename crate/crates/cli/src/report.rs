//! Comparison tables and validation curves across completed runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::error::CliError;
use crate::pipeline::{RunMetrics, HISTORY_CSV, METRICS_JSON};
use crate::render::{line_plot_svg, Series};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no completed runs found under {0:?}")]
    NoRunsFound(Vec<PathBuf>),
    #[error("{path}: {message}")]
    BadRun { path: PathBuf, message: String },
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::data(e.to_string())
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct HistoryRow {
    pub stage: usize,
    pub patch_size: usize,
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub val_f1: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub label: String,
    pub dir: PathBuf,
    pub metrics: RunMetrics,
    pub history: Vec<HistoryRow>,
}

/// Run directories among `paths`: each path itself if it holds a metrics
/// file, else its immediate subdirectories that do, in name order.
pub fn discover_runs(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in paths {
        if p.join(METRICS_JSON).is_file() {
            out.push(p.clone());
            continue;
        }
        let Ok(entries) = fs::read_dir(p) else { continue };
        let mut subs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join(METRICS_JSON).is_file())
            .collect();
        subs.sort();
        out.extend(subs);
    }
    out
}

pub fn load_run(dir: &Path) -> Result<RunRecord, ReportError> {
    let bad = |message: String| ReportError::BadRun {
        path: dir.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(dir.join(METRICS_JSON)).map_err(|e| bad(e.to_string()))?;
    let metrics: RunMetrics = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let mut history = Vec::new();
    let hist_path = dir.join(HISTORY_CSV);
    if hist_path.is_file() {
        let mut reader = csv::Reader::from_path(&hist_path).map_err(|e| bad(e.to_string()))?;
        for row in reader.deserialize() {
            history.push(row.map_err(|e| bad(e.to_string()))?);
        }
    }
    let label = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(RunRecord {
        label,
        dir: dir.to_path_buf(),
        metrics,
        history,
    })
}

fn plan_label(plan: &[usize]) -> String {
    plan.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("→")
}

/// Markdown table, one row per run.
pub fn markdown_table(runs: &[RunRecord]) -> String {
    let mut s = String::from("| Run | Patch plan | Bands | mIoU | F1 | Precision | Recall | Best mIoU per stage |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in runs {
        let m = &r.metrics.final_metrics;
        let stages: Vec<String> = r
            .metrics
            .stages
            .iter()
            .map(|st| format!("{}: {}", st.patch_size, st.best_val_miou.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())))
            .collect();
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
            r.label,
            plan_label(&r.metrics.plan),
            r.metrics.bands,
            m.miou,
            m.f1,
            m.precision,
            m.recall,
            stages.join(", ")
        );
    }
    s
}

pub fn csv_table(runs: &[RunRecord]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::data(e.to_string());
    w.write_record(["run", "plan", "bands", "miou", "f1", "precision", "recall"]).map_err(err)?;
    for r in runs {
        let m = &r.metrics.final_metrics;
        let plan = r.metrics.plan.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
        w.write_record([
            r.label.clone(),
            plan,
            r.metrics.bands.clone(),
            m.miou.to_string(),
            m.f1.to_string(),
            m.precision.to_string(),
            m.recall.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Validation mIoU against the run-wide epoch index, with stage starts marked.
pub fn curves_svg(runs: &[RunRecord]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .map(|r| {
            let mut breaks = Vec::new();
            let points = r
                .history
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    if i > 0 && r.history[i - 1].stage != row.stage {
                        breaks.push(i as f64);
                    }
                    (i as f64, row.val_miou)
                })
                .collect();
            Series {
                label: r.label.clone(),
                points,
                breaks,
            }
        })
        .collect();
    line_plot_svg("Validation mIoU per epoch", "epoch (all stages)", "val mIoU", &series)
}

/// Writes `report.md`, `report.csv` and `curves.svg` into `out_dir`.
pub fn write_report(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dirs = discover_runs(paths);
    if dirs.is_empty() {
        return Err(ReportError::NoRunsFound(paths.to_vec()).into());
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out_dir)?;
    let md = out_dir.join("report.md");
    let mut text = String::from("# Run comparison\n\n");
    text.push_str(&markdown_table(&runs));
    text.push_str("\n![validation curves](curves.svg)\n");
    fs::write(&md, text)?;
    let csv_path = out_dir.join("report.csv");
    fs::write(&csv_path, csv_table(&runs)?)?;
    let svg = out_dir.join("curves.svg");
    fs::write(&svg, curves_svg(&runs))?;
    Ok(vec![md, csv_path, svg])
}
