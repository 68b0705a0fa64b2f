//! Confusion matrices and macro-averaged classification metrics.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("class index {index} out of range for {size} classes")]
    OutOfRange { index: usize, size: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("class name count {names} does not match matrix size {size}")]
    Names { names: usize, size: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(size: usize) -> Self {
        ConfusionMatrix {
            size,
            counts: vec![0; size * size],
        }
    }

    /// Builds from row-major counts.
    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let size = rows.len();
        let mut cm = Self::new(size);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), size, "confusion matrix rows must be square");
            cm.counts[i * size..(i + 1) * size].copy_from_slice(row);
        }
        cm
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.size + predicted]
    }

    pub fn accumulate(&mut self, actual: usize, predicted: usize) -> Result<()> {
        for index in [actual, predicted] {
            if index >= self.size {
                return Err(MetricsError::OutOfRange { index, size: self.size });
            }
        }
        self.counts[actual * self.size + predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.size).map(|i| self.get(i, i)).sum()
    }

    pub fn per_class_counts(&self, i: usize) -> ClassCounts {
        let tp = self.get(i, i);
        let row: u64 = (0..self.size).map(|j| self.get(i, j)).sum();
        let col: u64 = (0..self.size).map(|j| self.get(j, i)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    /// Integer grid with class-name headers.
    pub fn render(&self, names: &[String]) -> Result<String> {
        if names.len() != self.size {
            return Err(MetricsError::Names {
                names: names.len(),
                size: self.size,
            });
        }
        let cell = self
            .counts
            .iter()
            .map(|c| c.to_string().len())
            .chain(names.iter().map(|n| n.len()))
            .max()
            .unwrap_or(1);
        let label = names.iter().map(|n| n.len()).max().unwrap_or(0).max("actual\\pred".len());
        let mut out = format!("{:<label$}", "actual\\pred");
        for n in names {
            let _ = write!(out, " {n:>cell$}");
        }
        out.push('\n');
        for (i, n) in names.iter().enumerate() {
            let _ = write!(out, "{n:<label$}");
            for j in 0..self.size {
                let _ = write!(out, " {:>cell$}", self.get(i, j));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy_eq1: f64,
    pub specificity: f64,
    pub precision: f64,
    pub recall: f64,
    pub error_rate: f64,
    pub f1: f64,
    pub top1_accuracy: f64,
    /// Undefined per-class ratios that were counted as 0.
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64, what: &str, class: usize, warnings: &mut Vec<String>) -> f64 {
    if den == 0 {
        warnings.push(format!("{what} undefined for class {class}; counted as 0"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MacroMetrics> {
    let total = cm.total();
    if total == 0 || cm.size == 0 {
        return Err(MetricsError::Empty);
    }
    let k = cm.size as f64;
    let mut warnings = Vec::new();
    let (mut acc, mut spec, mut prec, mut rec, mut err) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..cm.size {
        let c = cm.per_class_counts(i);
        acc += (c.tp + c.tn) as f64 / total as f64;
        spec += ratio(c.tn, c.fp + c.tn, "specificity", i, &mut warnings);
        prec += ratio(c.tp, c.tp + c.fp, "precision", i, &mut warnings);
        rec += ratio(c.tp, c.tp + c.fn_, "recall", i, &mut warnings);
        err += (c.fp + c.fn_) as f64 / total as f64;
    }
    let (precision, recall) = (prec / k, rec / k);
    let f1 = if precision + recall == 0.0 {
        warnings.push("f1 undefined (precision + recall = 0); counted as 0".into());
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(MacroMetrics {
        accuracy_eq1: acc / k,
        specificity: spec / k,
        precision,
        recall,
        error_rate: err / k,
        f1,
        top1_accuracy: cm.trace() as f64 / total as f64,
        warnings,
    })
}

impl MacroMetrics {
    /// All seven values at four decimals.
    pub fn report(&self) -> String {
        let rows = [
            ("top1_accuracy", self.top1_accuracy),
            ("accuracy_eq1", self.accuracy_eq1),
            ("specificity", self.specificity),
            ("precision", self.precision),
            ("recall", self.recall),
            ("error_rate", self.error_rate),
            ("f1", self.f1),
        ];
        rows.iter().map(|(k, v)| format!("{k:<14} {v:.4}\n")).collect()
    }
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub actual: usize,
    pub predicted: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Misclassified {
    pub sample_id: String,
    pub actual: String,
    pub predicted: String,
    pub confidence: f64,
}

/// Every wrong prediction, most confident first (ties keep input order).
pub fn dump_misclassified(predictions: &[Prediction], class_names: &[String]) -> Vec<Misclassified> {
    let mut out: Vec<Misclassified> = predictions
        .iter()
        .filter(|p| p.actual != p.predicted)
        .map(|p| Misclassified {
            sample_id: p.sample_id.clone(),
            actual: class_names[p.actual].clone(),
            predicted: class_names[p.predicted].clone(),
            confidence: p.confidence,
        })
        .collect();
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out
}
