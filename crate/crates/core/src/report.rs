//! CSV and JSON output for experiment results.
//!
//! Files carry no timestamps, so identical runs produce identical bytes.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::continual::ContinualReport;
use crate::error::{Error, Result};
use crate::metrics::{bin_edges, SparsityReport};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
    }
    Ok(())
}

/// Serialize rows as CSV with a header line.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::io("encoding csv", e.into()))?;
    }
    w.into_inner().map_err(|e| Error::io("encoding csv", e.into_error()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    create_parent(path)?;
    let bytes = csv_bytes(rows)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::io("encoding json", std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityRow {
    pub layer: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub layer: usize,
    pub neuron: usize,
    pub r: f64,
}

pub fn sparsity_rows(report: &SparsityReport) -> Vec<SparsityRow> {
    report
        .per_layer
        .iter()
        .map(|l| SparsityRow {
            layer: l.layer,
            n: l.n,
            s: l.s,
        })
        .collect()
}

pub fn rate_rows(report: &SparsityReport) -> Vec<RateRow> {
    report
        .per_layer
        .iter()
        .flat_map(|l| {
            l.r.iter().enumerate().map(move |(neuron, &r)| RateRow {
                layer: l.layer,
                neuron,
                r,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

pub fn histogram_rows(counts: &[usize], range: (f64, f64)) -> Vec<HistogramRow> {
    bin_edges(counts.len(), range)
        .into_iter()
        .zip(counts)
        .map(|((bin_lo, bin_hi), &count)| HistogramRow { bin_lo, bin_hi, count })
        .collect()
}

/// One accuracy cell, or a per-task summary when `eval_task` is `average`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinualRow {
    pub after_task: usize,
    pub eval_task: String,
    pub accuracy: f64,
}

pub fn continual_rows(report: &ContinualReport) -> Vec<ContinualRow> {
    let mut rows = Vec::new();
    for (t, row) in report.accuracy_matrix.iter().enumerate() {
        for (k, &accuracy) in row.iter().enumerate() {
            rows.push(ContinualRow {
                after_task: t,
                eval_task: k.to_string(),
                accuracy,
            });
        }
        rows.push(ContinualRow {
            after_task: t,
            eval_task: "average".into(),
            accuracy: report.average_accuracy[t],
        });
    }
    rows
}
