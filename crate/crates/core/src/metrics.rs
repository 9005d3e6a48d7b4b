//! Confusion matrices, per-class precision/recall/F1 and macro summaries.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = classes.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape(format!("confusion counts must be {k}x{k}")));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_labels(classes: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::invalid(format!(
                "{} true labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(classes);
        let k = cm.num_classes();
        for (&t, &p) in truth.iter().zip(predicted) {
            for label in [t, p] {
                if label >= k {
                    return Err(Error::LabelOutOfRange { label, classes: k });
                }
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// `(tp, tn, fp, fn)` treating class `c` as positive.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[c][c];
        let fp = self.predicted(c) - tp;
        let fn_ = self.support(c) - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, tn, fp, fn_)
    }

    /// `(tp + tn) / total` for class `c` against the rest.
    pub fn binary_accuracy(&self, c: usize) -> f64 {
        let (tp, tn, _, _) = self.one_vs_rest(c);
        ratio(tp + tn, self.total())
    }

    pub fn overall_accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Harmonic mean; zero when both inputs are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Zero denominators yield 0 for that metric, with a warning.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.num_classes())
        .map(|c| {
            let (tp, _, fp, fn_) = cm.one_vs_rest(c);
            if tp + fp == 0 {
                warn!("class {} was never predicted; precision set to 0", cm.classes[c]);
            }
            if tp + fn_ == 0 {
                warn!("class {} has no samples; recall set to 0", cm.classes[c]);
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            ClassMetrics {
                class: cm.classes[c].clone(),
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: tp + fn_,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// trace / total
    pub overall_accuracy: f64,
}

/// Unweighted means of per-class values.
pub fn macro_summary(per_class: &[ClassMetrics], overall_accuracy: f64) -> SummaryMetrics {
    let n = per_class.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    SummaryMetrics {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        overall_accuracy,
    }
}

pub fn summary(cm: &ConfusionMatrix) -> SummaryMetrics {
    macro_summary(&per_class_metrics(cm), cm.overall_accuracy())
}

/// Row-stochastic matrix plus, per row, whether the class had no samples
/// (such rows are all zero).
pub fn normalize_rows(cm: &ConfusionMatrix) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut empty = Vec::with_capacity(cm.num_classes());
    let rows = cm
        .counts
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            empty.push(s == 0);
            row.iter().map(|&v| ratio(v, s)).collect()
        })
        .collect();
    (rows, empty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<ClassMetrics>,
    pub summary: SummaryMetrics,
    pub confusion: ConfusionMatrix,
}

impl Report {
    pub fn new(cm: &ConfusionMatrix) -> Result<Self> {
        if cm.total() == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let classes = per_class_metrics(cm);
        let summary = macro_summary(&classes, cm.overall_accuracy());
        Ok(Report {
            classes,
            summary,
            confusion: cm.clone(),
        })
    }

    /// Per-class rows then a `macro` row whose support is the total.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "precision", "recall", "f1", "support"])?;
        for m in &self.classes {
            w.write_record([
                m.class.clone(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.f1.to_string(),
                m.support.to_string(),
            ])?;
        }
        let s = &self.summary;
        w.write_record([
            "macro".to_string(),
            s.macro_precision.to_string(),
            s.macro_recall.to_string(),
            s.macro_f1.to_string(),
            self.confusion.total().to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Write the per-class table and summary. An empty matrix is an error and
/// leaves no file behind.
pub fn emit_report(cm: &ConfusionMatrix, path: &Path, format: ReportFormat) -> Result<Report> {
    let report = Report::new(cm)?;
    let text = match format {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv()?,
    };
    std::fs::write(path, text).map_err(Error::at_path(path))?;
    Ok(report)
}

pub fn read_report_json(path: &Path) -> Result<Report> {
    let text = std::fs::read_to_string(path).map_err(Error::at_path(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Row-normalized matrix as a CSV grid: header `true\predicted,<classes>`.
pub fn write_normalized_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let (rows, _) = normalize_rows(cm);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(cm.classes.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in cm.classes.iter().zip(rows) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
