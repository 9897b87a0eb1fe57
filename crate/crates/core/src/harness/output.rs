//! Files written for a finished run.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::neural_map::{encode_snapshot, FeatureGrid};
use crate::network_sim::trace_jsonl;
use crate::uncertainty::{export_uncertainty, uncertainty_csv, UncertaintyCounter};

use super::svg::{Chart, Point, Series};
use super::{CellRecord, RunRecord, Variant};

pub const METRICS_HEADER: &str = "trial,agent,iter,artifacts,holes,completion,disagreement";
/// Written in place of a distance when a map has no surface at all.
pub const NO_SURFACE: &str = "no-surface";

fn distance(v: Option<f64>) -> String {
    v.map_or_else(|| NO_SURFACE.to_string(), |x| x.to_string())
}

/// One line per evaluated (trial, agent, iteration).
pub fn metrics_csv(cell: &CellRecord) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in cell.rows() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.trial,
            r.agent,
            r.iter,
            distance(r.report.artifacts),
            distance(r.report.holes),
            r.report.completion,
            r.report.disagreement
        ));
    }
    out
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate {
            mean: f64::NAN,
            std: f64::NAN,
            n,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, std, n }
}

/// Final-iteration statistics of one cell over all agents and trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub cell: String,
    pub optimizer: String,
    pub variant: &'static str,
    pub value: Option<f64>,
    pub completion: Aggregate,
    /// Over agents that produced a surface.
    pub artifacts: Aggregate,
    pub holes: Aggregate,
    pub no_surface: usize,
}

pub fn summary_rows(record: &RunRecord) -> Vec<SummaryRow> {
    record
        .cells
        .iter()
        .map(|c| {
            let rows = c.final_rows();
            let completion: Vec<f64> = rows.iter().map(|r| r.report.completion).collect();
            let artifacts: Vec<f64> = rows.iter().filter_map(|r| r.report.artifacts).collect();
            let holes: Vec<f64> = rows.iter().filter_map(|r| r.report.holes).collect();
            SummaryRow {
                cell: c.cell.label(),
                optimizer: c.cell.optimizer.name().into(),
                variant: c.cell.variant.column(),
                value: c.cell.variant.value(),
                completion: aggregate(&completion),
                artifacts: aggregate(&artifacts),
                holes: aggregate(&holes),
                no_surface: rows.len() - artifacts.len(),
            }
        })
        .collect()
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "cell,optimizer,variant,value,n,completion_mean,completion_std,artifacts_mean,artifacts_std,holes_mean,holes_std,no_surface\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cell,
            r.optimizer,
            r.variant,
            r.value.map_or(String::new(), |v| v.to_string()),
            r.completion.n,
            r.completion.mean,
            r.completion.std,
            r.artifacts.mean,
            r.artifacts.std,
            r.holes.mean,
            r.holes.std,
            r.no_surface
        ));
    }
    out
}

/// Mean ± std of completion per evaluated iteration.
fn completion_series(cell: &CellRecord) -> Series {
    let mut iters: Vec<usize> = cell.rows().map(|r| r.iter).collect();
    iters.sort_unstable();
    iters.dedup();
    Series {
        label: cell.cell.label(),
        points: iters
            .into_iter()
            .map(|it| {
                let v: Vec<f64> = cell
                    .rows()
                    .filter(|r| r.iter == it)
                    .map(|r| r.report.completion)
                    .collect();
                let a = aggregate(&v);
                Point {
                    x: it as f64,
                    y: a.mean,
                    err: Some(a.std),
                }
            })
            .collect(),
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>, written: &mut Vec<PathBuf>) -> io::Result<()> {
    fs::write(&path, contents)?;
    written.push(path);
    Ok(())
}

#[derive(Serialize)]
struct RunIndex<'a> {
    name: &'a str,
    config_hash: &'a str,
    cells: Vec<String>,
    summary: &'a [SummaryRow],
}

fn emit_cell(
    record: &RunRecord,
    cell: &CellRecord,
    grid: &FeatureGrid,
    dir: &Path,
    written: &mut Vec<PathBuf>,
) -> io::Result<()> {
    fs::create_dir_all(dir.join("snapshots"))?;
    write(dir.join("metrics.csv"), metrics_csv(cell), written)?;
    let trace: Vec<_> = cell.trials.iter().flat_map(|t| t.trace.iter().copied()).collect();
    write(dir.join("messages.jsonl"), trace_jsonl(&trace), written)?;
    if let Some(first) = cell.trials.first() {
        for (agent, counts) in first.counts.iter().enumerate() {
            let csv = uncertainty_csv(&export_uncertainty(&UncertaintyCounter(counts.clone()), grid));
            if agent == 0 {
                write(dir.join("uncertainty.csv"), &csv, written)?;
            }
            write(dir.join(format!("uncertainty_agent{agent}.csv")), &csv, written)?;
        }
    }
    let cfg = &record.config.grid;
    for t in &cell.trials {
        for (agent, theta) in t.thetas.iter().enumerate() {
            let bytes = encode_snapshot(theta, cfg.levels() as u32, cfg.feature_dim as u32);
            write(
                dir.join("snapshots").join(format!("trial{}_agent{agent}.nmap", t.trial)),
                bytes,
                written,
            )?;
        }
    }
    let chart = Chart {
        title: format!("{}: completion", cell.cell.label()),
        x_label: "iteration".into(),
        y_label: "completion (%)".into(),
        series: vec![completion_series(cell)],
    };
    write(dir.join("completion.svg"), chart.render(), written)
}

/// Write every artefact of `record` under `out`; returns the files written.
///
/// A run with a single cell writes its per-cell files directly into `out`;
/// otherwise each cell gets a subdirectory named after its label.
pub fn emit_outputs(record: &RunRecord, out: &Path) -> io::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    fs::create_dir_all(out)?;
    let grid = FeatureGrid::new(record.config.grid.clone())
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let single = record.cells.len() == 1;
    for cell in &record.cells {
        let dir = if single {
            out.to_path_buf()
        } else {
            out.join(cell.cell.label())
        };
        emit_cell(record, cell, &grid, &dir, &mut written)?;
    }

    let summary = summary_rows(record);
    write(out.join("summary.csv"), summary_csv(&summary), &mut written)?;
    write(out.join("config.json"), record.config.to_json(), &mut written)?;
    let index = RunIndex {
        name: &record.config.name,
        config_hash: &record.config_hash,
        cells: record.cells.iter().map(|c| c.cell.label()).collect(),
        summary: &summary,
    };
    write(
        out.join("run.json"),
        serde_json::to_string_pretty(&index).expect("index serializes"),
        &mut written,
    )?;

    let chart = Chart {
        title: format!("{}: completion vs iteration", record.config.name),
        x_label: "iteration".into(),
        y_label: "completion (%)".into(),
        series: record.cells.iter().map(completion_series).collect(),
    };
    write(out.join("completion_vs_iter.svg"), chart.render(), &mut written)?;

    if let Some(first) = record.cells.first().filter(|c| c.cell.variant != Variant::Base) {
        let column = first.cell.variant.column();
        let series = record
            .config
            .optimizers()
            .into_iter()
            .map(|opt| Series {
                label: opt.name().into(),
                points: summary
                    .iter()
                    .filter(|s| s.optimizer == opt.name())
                    .map(|s| Point {
                        x: s.value.unwrap_or(f64::NAN),
                        y: s.completion.mean,
                        err: Some(s.completion.std),
                    })
                    .collect(),
            })
            .collect();
        let chart = Chart {
            title: format!("{}: final completion", record.config.name),
            x_label: column.replace('_', " "),
            y_label: "completion (%)".into(),
            series,
        };
        write(out.join(format!("completion_vs_{column}.svg")), chart.render(), &mut written)?;
    }
    Ok(written)
}
