//! Confusion-matrix accounting, precision/recall/F1 reports and the CSV
//! exports used for plotting training curves, embeddings and ROC curves.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::save_tensor;
use crate::tensor::Tensor;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        Self {
            class_names,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(class_names: Vec<String>, rows: &[Vec<u64>]) -> Result<Self> {
        let k = class_names.len();
        if rows.len() != k || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(format!("confusion counts must be {k}x{k}")));
        }
        Ok(Self {
            class_names,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes() + pred]
    }

    pub fn accumulate(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.num_classes();
        if truth >= k || pred >= k {
            return Err(Error::InvalidArgument(format!(
                "class index out of range: true {truth}, predicted {pred}, classes {k}"
            )));
        }
        self.counts[truth * k + pred] += 1;
        Ok(())
    }

    /// Elementwise sum, for combining evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_names != other.class_names {
            return Err(Error::InvalidArgument("cannot merge matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|k| self.get(k, k)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes()).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.num_classes()).map(|t| self.get(t, pred)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes().max(1)).map(<[u64]>::to_vec).collect()
    }
}

/// Scores for one class, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Nothing was predicted as this class, so precision is reported as 0.
    pub precision_undefined: bool,
    /// The class has no true samples, so recall is reported as 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub total: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (100.0 * num as f64 / den as f64, false)
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class precision, recall and F1 (per-class recall doubles as the
/// class accuracy), overall accuracy, and unweighted macro means.
pub fn compute_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("cannot score an empty confusion matrix".into()));
    }
    let classes: Vec<ClassMetrics> = (0..cm.num_classes())
        .map(|k| {
            let tp = cm.get(k, k);
            let (precision, precision_undefined) = ratio(tp, cm.col_sum(k));
            let (recall, recall_undefined) = ratio(tp, cm.row_sum(k));
            ClassMetrics {
                name: cm.class_names[k].clone(),
                precision,
                recall,
                f1: harmonic(precision, recall),
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let k = classes.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| classes.iter().map(f).sum::<f64>() / k;
    Ok(MetricsReport {
        total,
        accuracy: 100.0 * cm.trace() as f64 / total as f64,
        macro_precision: mean(|c| c.precision),
        macro_recall: mean(|c| c.recall),
        macro_f1: mean(|c| c.f1),
        classes,
    })
}

pub const MACRO_ROW: &str = "__macro__";

fn create(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

/// One row per class plus a final `__macro__` row, two decimals.
pub fn write_report_csv(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["class", "precision", "recall", "f1"]).map_err(err)?;
    for c in &report.classes {
        w.write_record([c.name.as_str(), &pct(c.precision), &pct(c.recall), &pct(c.f1)])
            .map_err(err)?;
    }
    w.write_record([
        MACRO_ROW,
        &pct(report.macro_precision),
        &pct(report.macro_recall),
        &pct(report.macro_f1),
    ])
    .map_err(err)?;
    finish(path, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["class", "precision", "recall", "f1"] {
        return Err(Error::Format(format!("{}: unexpected report header", path.display())));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        rows.push(ReportRow {
            class: rec[0].to_string(),
            precision: num(&rec[1])?,
            recall: num(&rec[2])?,
            f1: num(&rec[3])?,
        });
    }
    Ok(rows)
}

/// K x K grid with a header row and a leading column of class names.
pub fn write_confusion_csv(path: impl AsRef<Path>, cm: &ConfusionMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let err = |e| csv_error(path, e);
    let mut header = vec![String::new()];
    header.extend(cm.class_names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for (name, row) in cm.class_names.iter().zip(cm.rows()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(err)?;
    }
    finish(path, w)
}

pub fn read_confusion_csv(path: impl AsRef<Path>) -> Result<ConfusionMatrix> {
    let path = path.as_ref();
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let names: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<u64>().map_err(|_| bad("non-integer count")))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    ConfusionMatrix::from_counts(names, &rows).map_err(|_| bad("confusion grid is not square"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
}

/// Values are written with round-trip precision so reruns can be compared
/// byte for byte.
pub fn write_history_csv(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr"])
        .map_err(err)?;
    for h in rows {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.train_acc.to_string(),
            h.test_loss.to_string(),
            h.test_acc.to_string(),
            h.lr.to_string(),
        ])
        .map_err(err)?;
    }
    finish(path, w)
}

pub fn read_history_csv(path: impl AsRef<Path>) -> Result<Vec<HistoryRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

/// One evaluated sample: identifier, true and predicted class, and the
/// full probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Writes the embedding matrix as YTF and a sidecar CSV with one row per
/// embedding row.
pub fn write_embeddings(
    ytf_path: impl AsRef<Path>,
    csv_path: impl AsRef<Path>,
    embeddings: &Tensor,
    predictions: &[Prediction],
) -> Result<()> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != predictions.len() {
        return Err(Error::InvalidArgument(format!(
            "embeddings {:?} do not match {} predictions",
            embeddings.shape(),
            predictions.len()
        )));
    }
    save_tensor(ytf_path, embeddings)?;
    let path = csv_path.as_ref();
    let mut w = create(path)?;
    let err = |e| csv_error(path, e);
    w.write_record(["sample_id", "label", "predicted", "max_prob"]).map_err(err)?;
    for p in predictions {
        w.write_record([
            p.sample_id.clone(),
            p.label.to_string(),
            p.predicted.to_string(),
            p.max_prob().to_string(),
        ])
        .map_err(err)?;
    }
    finish(path, w)
}

/// Per-class probabilities for external ROC analysis.
pub fn write_scores_csv(path: impl AsRef<Path>, class_names: &[String], predictions: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let err = |e| csv_error(path, e);
    let mut header = vec!["sample_id".to_string(), "label".to_string()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for p in predictions {
        let mut rec = vec![p.sample_id.clone(), p.label.to_string()];
        rec.extend(p.probs.iter().map(f64::to_string));
        w.write_record(&rec).map_err(err)?;
    }
    finish(path, w)
}
