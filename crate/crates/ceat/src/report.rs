//! Run artifacts: the JSON report, the CSV accuracy matrix, and the
//! plot-ready per-step accuracy series. All files are written atomically
//! via a temp-file rename so a crash never leaves a half-written
//! artifact behind.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::AccuracyMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    /// Global class ids trained in this task, in classifier-column order.
    pub classes: Vec<usize>,
    /// Branch scale used for this task's expansion; absent on the base task.
    pub lambda: Option<f64>,
    pub backbone_params: usize,
    pub total_params: usize,
    /// Max absolute logit deviation between the expanded and absorbed
    /// model; absent on the base task, which absorbs nothing.
    pub absorption_residual: Option<f64>,
    pub per_task_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub matrix: Vec<Vec<f64>>,
    pub per_step_overall: Vec<f64>,
    pub average_incremental_accuracy: f64,
    pub average_forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub schedule: Vec<Vec<usize>>,
    pub test_sizes: Vec<usize>,
    pub tasks: Vec<TaskRecord>,
    pub matrix: Vec<Vec<f64>>,
    pub average_incremental_accuracy: f64,
    pub average_forgetting: f64,
    pub baseline: Option<BaselineReport>,
    /// Defaulted design choices in effect for this run.
    pub deviations: Vec<String>,
    pub data_access_summary: Vec<(usize, usize, u64)>,
    pub data_access_violations: Vec<String>,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Report(e.to_string()))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Report(e.to_string()))
    }
}

/// Writes to a dotfile next to the target, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Report(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Lower-triangular matrix as CSV: each record is `task,a0,...,at`.
/// Floats print in shortest round-trip form, so reading them back
/// reproduces the exact bits.
pub fn write_matrix_csv(path: &Path, matrix: &AccuracyMatrix) -> Result<()> {
    let mut out = String::new();
    for (t, row) in matrix.rows().iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_matrix_csv(path: &Path) -> Result<AccuracyMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let task: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| Error::Report(format!("line {}: bad task index: {e}", lineno + 1)))?;
        if task != rows.len() {
            return Err(Error::Report(format!(
                "line {}: task {task} out of order",
                lineno + 1
            )));
        }
        let row: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Report(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    AccuracyMatrix::from_rows(rows)
}

/// Per-step overall accuracy, one row per task checkpoint, with the
/// baseline column when present.
pub fn write_accuracy_series_csv(
    path: &Path,
    overall: &[f64],
    baseline: Option<&[f64]>,
) -> Result<()> {
    if let Some(b) = baseline {
        if b.len() != overall.len() {
            return Err(Error::Report(format!(
                "baseline series has {} steps, run has {}",
                b.len(),
                overall.len()
            )));
        }
    }
    let mut out = String::from(match baseline {
        Some(_) => "step,overall_accuracy,baseline_overall_accuracy\n",
        None => "step,overall_accuracy\n",
    });
    for (t, v) in overall.iter().enumerate() {
        out.push_str(&t.to_string());
        out.push(',');
        out.push_str(&format!("{v}"));
        if let Some(b) = baseline {
            out.push(',');
            out.push_str(&format!("{}", b[t]));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
