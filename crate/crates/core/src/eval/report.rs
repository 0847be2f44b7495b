use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::metrics::TargetScores;
use super::{AdaptMode, HeadVariant, TaskKind};
use crate::error::{Error, Result};

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const PREDICTIONS_BLOB: &str = "predictions.f32";
pub const LABELS_BLOB: &str = "labels.f32";

/// Test-split scores plus the per-sample predictions they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mode: AdaptMode,
    pub head: HeadVariant,
    pub task: TaskKind,
    pub scores: TargetScores,
    /// Probabilities (classification) or predictions in target units.
    pub predictions: Array2<f32>,
    pub labels: Array2<f32>,
    pub num_train: usize,
    pub final_train_loss: f64,
}

/// Serialized form of the report without the per-sample arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mode: AdaptMode,
    pub head: HeadVariant,
    pub task: TaskKind,
    pub metric: String,
    pub macro_score: Option<f64>,
    pub per_target: Vec<Option<f64>>,
    pub excluded: Vec<(usize, String)>,
    pub num_train: usize,
    pub num_test: usize,
    pub num_targets: usize,
    pub final_train_loss: f64,
    pub predictions_file: String,
    pub labels_file: String,
}

impl MetricReport {
    pub fn metric_name(&self) -> &'static str {
        self.task.metric_name()
    }

    /// `1 - macro AUROC` for classification, macro standardized MAE for
    /// regression; NaN if every target was excluded.
    pub fn residual_error(&self) -> f64 {
        match (self.task, self.scores.macro_score) {
            (_, None) => f64::NAN,
            (TaskKind::MultilabelClassification, Some(a)) => 1.0 - a,
            (TaskKind::Regression, Some(m)) => m,
        }
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            mode: self.mode,
            head: self.head,
            task: self.task,
            metric: self.metric_name().to_string(),
            macro_score: self.scores.macro_score,
            per_target: self.scores.per_target.clone(),
            excluded: self.scores.excluded.clone(),
            num_train: self.num_train,
            num_test: self.predictions.nrows(),
            num_targets: self.predictions.ncols(),
            final_train_loss: self.final_train_loss,
            predictions_file: PREDICTIONS_BLOB.into(),
            labels_file: LABELS_BLOB.into(),
        }
    }

    pub fn csv(&self) -> String {
        let mut s = format!("target,{},status\n", self.metric_name());
        for (t, v) in self.scores.per_target.iter().enumerate() {
            match v {
                Some(v) => {
                    let _ = writeln!(s, "{t},{v:?},included");
                }
                None => {
                    let reason = self
                        .scores
                        .excluded
                        .iter()
                        .find(|(i, _)| *i == t)
                        .map_or("excluded", |(_, r)| r.as_str());
                    let _ = writeln!(s, "{t},,excluded: {reason}");
                }
            }
        }
        match self.scores.macro_score {
            Some(m) => {
                let _ = writeln!(s, "macro,{m:?},aggregate");
            }
            None => s.push_str("macro,,no valid targets\n"),
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = serde_json::to_string_pretty(&self.summary())
            .map_err(|e| Error::Data(format!("serializing report: {e}")))?;
        let files: [(&str, Vec<u8>); 4] = [
            (METRICS_CSV, self.csv().into_bytes()),
            (SUMMARY_JSON, summary.into_bytes()),
            (PREDICTIONS_BLOB, f32_bytes(&self.predictions)),
            (LABELS_BLOB, f32_bytes(&self.labels)),
        ];
        for (name, bytes) in files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn f32_bytes(a: &Array2<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_blob(path: &Path, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Data(format!(
            "{}: {} bytes, expected {rows}x{cols} f32 values",
            path.display(),
            bytes.len()
        )));
    }
    let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Shape(e.to_string()))
}

/// Reads a report directory written by [`MetricReport::write`]: the summary
/// plus `(predictions, labels)`.
pub fn read_report(dir: &Path) -> Result<(ReportSummary, Array2<f32>, Array2<f32>)> {
    let path = dir.join(SUMMARY_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: ReportSummary =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let p = read_blob(&dir.join(&summary.predictions_file), summary.num_test, summary.num_targets)?;
    let l = read_blob(&dir.join(&summary.labels_file), summary.num_test, summary.num_targets)?;
    Ok((summary, p, l))
}
