//! Architecture × optimizer × freeze ratio × head grids.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, fit, transfer_base, Checkpoint, Result, Subset, TrainConfig, TrainError};
use crate::arch::{build_architecture, default_input_size, HeadKind};
use crate::model::Model;
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub architectures: Vec<String>,
    pub optimizers: Vec<OptimizerConfig>,
    pub freeze_ratios: Vec<f64>,
    pub heads: Vec<HeadKind>,
    /// Square input side; `None` uses each architecture's default.
    pub input_size: Option<usize>,
    /// Template for every cell; optimizer and freeze ratio are overridden.
    pub config: TrainConfig,
    /// Per-architecture checkpoints whose base weights start every cell of
    /// that architecture. Cells without one start from the seeded init.
    pub pretrained: BTreeMap<String, Checkpoint>,
}

impl SweepSpec {
    pub fn new(architectures: Vec<String>, optimizers: Vec<OptimizerKind>, freeze_ratios: Vec<f64>) -> Self {
        SweepSpec {
            architectures,
            optimizers: optimizers.into_iter().map(OptimizerConfig::new).collect(),
            freeze_ratios,
            heads: vec![HeadKind::Gap],
            input_size: None,
            config: TrainConfig::default(),
            pretrained: BTreeMap::new(),
        }
    }

    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for arch in &self.architectures {
            for &head in &self.heads {
                for opt in &self.optimizers {
                    for &ratio in &self.freeze_ratios {
                        out.push(SweepCell {
                            architecture: arch.clone(),
                            optimizer: *opt,
                            freeze_ratio: ratio,
                            head,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub architecture: String,
    pub optimizer: OptimizerConfig,
    pub freeze_ratio: f64,
    pub head: HeadKind,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub train: Subset<'a>,
    pub validation: Option<Subset<'a>>,
    pub test: Subset<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub architecture: String,
    pub optimizer: OptimizerKind,
    pub freeze_ratio: f64,
    pub head: String,
    /// `None` for a completed cell, otherwise the failure message.
    pub error: Option<String>,
    /// Top-1 test accuracy.
    pub accuracy: Option<f64>,
    pub accuracy_eq1: Option<f64>,
    pub loss: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

const COLUMNS: [&str; 11] = [
    "architecture",
    "optimizer",
    "freeze_ratio",
    "head",
    "status",
    "accuracy",
    "accuracy_eq1",
    "loss",
    "precision",
    "recall",
    "f1",
];

impl SweepRow {
    fn fields(&self, digits: Option<usize>) -> Vec<String> {
        let num = |v: Option<f64>| match (v, digits) {
            (Some(v), Some(d)) => format!("{v:.d$}"),
            (Some(v), None) => v.to_string(),
            (None, _) => String::new(),
        };
        vec![
            self.architecture.clone(),
            self.optimizer.to_string(),
            format!("{}", self.freeze_ratio),
            self.head.clone(),
            if self.is_ok() { "ok".into() } else { "failed".into() },
            num(self.accuracy),
            num(self.accuracy_eq1),
            num(self.loss),
            num(self.precision),
            num(self.recall),
            num(self.f1),
        ]
    }
}

impl SweepResult {
    /// Comma-separated table; failure messages follow as an `error` column.
    pub fn to_csv(&self) -> String {
        let mut out = COLUMNS.join(",");
        out.push_str(",error\n");
        for row in &self.rows {
            let mut fields = row.fields(None);
            fields.push(row.error.as_deref().unwrap_or("").replace([',', '\n'], ";"));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Human-readable aligned rendering with four decimals.
    pub fn render_table(&self) -> String {
        let rows: Vec<Vec<String>> = self.rows.iter().map(|r| r.fields(Some(4))).collect();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap())
            .collect();
        let mut out = String::new();
        let line = |cells: &[&str], out: &mut String| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 5 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&COLUMNS, &mut out);
        for r in &rows {
            let cells: Vec<&str> = r.iter().map(String::as_str).collect();
            line(&cells, &mut out);
        }
        for r in self.rows.iter().filter(|r| !r.is_ok()) {
            let _ = writeln!(
                out,
                "failed: {} {} {} {}: {}",
                r.architecture,
                r.optimizer,
                r.freeze_ratio,
                r.head,
                r.error.as_deref().unwrap_or("")
            );
        }
        out
    }
}

fn run_cell(spec: &SweepSpec, cell: &SweepCell, data: &SweepData<'_>) -> Result<(super::Evaluation, usize)> {
    let side = spec.input_size.unwrap_or_else(|| default_input_size(&cell.architecture));
    let classes = data.train.index.num_classes();
    let desc = build_architecture(&cell.architecture, [side, side, 3], classes, cell.head)?;
    let mut config = spec.config.clone();
    config.optimizer = cell.optimizer;
    config.freeze_ratio = cell.freeze_ratio;
    let mut model = Model::<f32>::new(desc, config.seed)?;
    if let Some(src) = spec.pretrained.get(&cell.architecture) {
        transfer_base(&src.model, &mut model)?;
    }
    model.apply_freeze(cell.freeze_ratio)?;
    let report = fit(&mut model, data.train, data.validation, &config, |_| {})?;
    let eval = evaluate(&model, data.test, config.batch_size)?;
    Ok((eval, report.history.len()))
}

/// Trains every cell from the same seed and evaluates it on the test
/// subset. A failing cell becomes a failed row; the sweep continues.
pub fn run_sweep(spec: &SweepSpec, data: SweepData<'_>, mut on_row: impl FnMut(&SweepRow)) -> Result<SweepResult> {
    for (what, empty) in [
        ("architecture", spec.architectures.is_empty()),
        ("optimizer", spec.optimizers.is_empty()),
        ("freeze ratio", spec.freeze_ratios.is_empty()),
        ("head", spec.heads.is_empty()),
    ] {
        if empty {
            return Err(TrainError::Config(format!("sweep needs at least one {what}")));
        }
    }
    let mut rows = Vec::new();
    for cell in spec.cells() {
        let mut row = SweepRow {
            architecture: cell.architecture.clone(),
            optimizer: cell.optimizer.kind,
            freeze_ratio: cell.freeze_ratio,
            head: cell.head.to_string(),
            error: None,
            accuracy: None,
            accuracy_eq1: None,
            loss: None,
            precision: None,
            recall: None,
            f1: None,
        };
        match run_cell(spec, &cell, &data) {
            Ok((eval, _)) => {
                let m = &eval.metrics;
                row.accuracy = Some(m.top1_accuracy);
                row.accuracy_eq1 = Some(m.accuracy_eq1);
                row.loss = Some(eval.loss);
                row.precision = Some(m.precision);
                row.recall = Some(m.recall);
                row.f1 = Some(m.f1);
            }
            Err(e) => {
                log::warn!("sweep cell {} {} {} failed: {e}", cell.architecture, cell.optimizer.kind, cell.freeze_ratio);
                row.error = Some(e.to_string());
            }
        }
        on_row(&row);
        rows.push(row);
    }
    Ok(SweepResult { rows })
}
