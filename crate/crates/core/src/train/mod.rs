//! Loss, the epoch loop, transfer learning, evaluation and sweeps.

mod checkpoint;
mod sweep;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchDescriptor, ArchError, HeadKind};
use crate::data::{self, AugmentConfig, BatchConfig, DataError, DatasetIndex};
use crate::layers::Mode;
use crate::metrics::{self, ConfusionMatrix, MacroMetrics, MetricsError, Prediction};
use crate::model::{Model, ModelError, NonFinite};
use crate::optim::{OptimError, OptimizerConfig, OptimizerKind, OptimizerState};
use crate::tensor::{Scalar, Tensor, TensorError};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError,
    Preprocessing, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use sweep::{run_sweep, SweepCell, SweepData, SweepResult, SweepRow, SweepSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}{}", describe(.location))]
    NonFinite {
        epoch: usize,
        batch: usize,
        location: Option<NonFinite>,
    },
    #[error("source checkpoint base does not match target model: {0}")]
    BaseMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn describe(loc: &Option<NonFinite>) -> String {
    match loc {
        Some(l) => format!(" (first non-finite {} in layer `{}`, parameter `{}`)", l.which, l.layer, l.param),
        None => " (all parameters finite; activations overflowed)".into(),
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Probabilities at the true label are clamped to this before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CrossEntropy<T: Scalar> {
    /// Mean over rows of `-ln p[true]`.
    pub loss: f64,
    /// Gradient with respect to the pre-softmax logits: `(p - y) / N`.
    pub grad: Tensor<T>,
    /// Rows whose true-class probability needed clamping.
    pub clamped: usize,
}

pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, one_hot: &Tensor<T>) -> Result<CrossEntropy<T>> {
    if probs.rank() != 2 || probs.shape() != one_hot.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            left: probs.shape().to_vec(),
            right: one_hot.shape().to_vec(),
        }
        .into());
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let mut loss = 0.0;
    let mut clamped = 0;
    for (p, y) in probs.data().chunks(k).zip(one_hot.data().chunks(k)) {
        for (&pi, &yi) in p.iter().zip(y) {
            if yi.as_f64() > 0.0 {
                let pv = pi.as_f64();
                if pv < PROB_FLOOR {
                    clamped += 1;
                }
                loss -= yi.as_f64() * pv.max(PROB_FLOOR).ln();
            }
        }
    }
    if clamped > 0 {
        log::warn!("cross_entropy: clamped {clamped} true-class probabilities to {PROB_FLOOR:e}");
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let grad = probs.sub(one_hot)?.map(|v| v * inv_n);
    Ok(CrossEntropy {
        loss: loss / n as f64,
        grad,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub freeze_ratio: f64,
    pub seed: u64,
    /// Applied to training batches and, when `augment_validation` is set,
    /// to validation batches as well.
    pub augment: Option<AugmentConfig>,
    pub augment_validation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::new(OptimizerKind::Sgd),
            freeze_ratio: 0.0,
            seed: 0,
            augment: None,
            augment_validation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.freeze_ratio) {
            return Err(TrainError::Config(format!("freeze_ratio must lie in [0, 1), got {}", self.freeze_ratio)));
        }
        if let Some(a) = &self.augment {
            a.validate().map_err(TrainError::Config)?;
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

/// A subset of a dataset, by sample index.
#[derive(Debug, Clone, Copy)]
pub struct Subset<'a> {
    pub index: &'a DatasetIndex,
    pub ids: &'a [usize],
}

impl<'a> Subset<'a> {
    pub fn new(index: &'a DatasetIndex, ids: &'a [usize]) -> Self {
        Subset { index, ids }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub first_batch_loss: f64,
}

fn image_size(model: &Model<f32>) -> (usize, usize) {
    let [h, w, _] = model.descriptor().input_shape;
    (h, w)
}

fn check_subset(model: &Model<f32>, subset: &Subset<'_>, what: &str) -> Result<()> {
    if subset.ids.is_empty() {
        return Err(TrainError::Config(format!("{what} set is empty")));
    }
    if subset.index.num_classes() != model.num_classes() {
        return Err(TrainError::Config(format!(
            "{what} set has {} classes, model predicts {}",
            subset.index.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Runs `config.epochs` epochs of mini-batch training on an existing model.
/// The model's current freeze plan is kept. `on_epoch` sees each record as
/// it is produced.
pub fn fit(
    model: &mut Model<f32>,
    train: Subset<'_>,
    validation: Option<Subset<'_>>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport> {
    config.validate()?;
    check_subset(model, &train, "training")?;
    if let Some(v) = &validation {
        check_subset(model, v, "validation")?;
    }
    let mut state = OptimizerState::new(config.optimizer, model.params().map(|(_, p)| p))?;
    let batch_config = BatchConfig {
        batch_size: config.batch_size,
        image_size: image_size(model),
        seed: config.seed,
        shuffle: true,
        augment: config.augment.filter(|a| !a.is_identity()),
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut first_batch_loss = f64::NAN;
    for epoch in 0..config.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, batch) in data::make_batches(train.index, train.ids, epoch, &batch_config).enumerate() {
            let batch = batch?;
            let n = batch.sample_ids.len();
            let probs = model.forward(&batch.images, Mode::Train)?;
            let ce = cross_entropy(&probs, &batch.labels)?;
            if !ce.loss.is_finite() {
                model.clear_caches();
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    location: model.locate_non_finite(),
                });
            }
            if epoch == 0 && b == 0 {
                first_batch_loss = ce.loss;
            }
            model.backward_logits(&ce.grad)?;
            state.step(&mut model.params_mut())?;
            if let Some(location) = model.locate_non_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    location: Some(location),
                });
            }
            loss_sum += ce.loss * n as f64;
            correct += probs
                .argmax_rows()?
                .iter()
                .zip(&batch.classes)
                .filter(|(p, c)| p == c)
                .count();
            seen += n;
        }
        let (val_loss, val_acc) = match &validation {
            Some(v) => {
                let mut val_config = batch_config.clone();
                val_config.shuffle = false;
                val_config.seed = config.seed ^ 0x7a11_da7a;
                if !config.augment_validation {
                    val_config.augment = None;
                }
                let (loss, acc) = quick_eval(model, v, &val_config, epoch)?;
                (Some(loss), Some(acc))
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {}: loss {:.4} acc {:.4}{}",
            record.epoch,
            record.train_loss,
            record.train_acc,
            match (record.val_loss, record.val_acc) {
                (Some(l), Some(a)) => format!(" val_loss {l:.4} val_acc {a:.4}"),
                _ => String::new(),
            }
        );
        on_epoch(&record);
        history.push(record);
    }
    model.clear_caches();
    Ok(FitReport {
        history,
        steps: state.step,
        first_batch_loss,
    })
}

/// Inference-mode loss and top-1 accuracy.
fn quick_eval(model: &Model<f32>, subset: &Subset<'_>, config: &BatchConfig, epoch: usize) -> Result<(f64, f64)> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for batch in data::make_batches(subset.index, subset.ids, epoch, config) {
        let batch = batch?;
        let probs = model.infer(&batch.images)?;
        loss += cross_entropy(&probs, &batch.labels)?.loss * batch.sample_ids.len() as f64;
        correct += probs
            .argmax_rows()?
            .iter()
            .zip(&batch.classes)
            .filter(|(p, c)| p == c)
            .count();
    }
    let n = subset.ids.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Builds a freshly initialized model from `config.seed`, applies the
/// freeze ratio and trains it.
pub fn train(
    descriptor: &ArchDescriptor,
    train_set: Subset<'_>,
    validation: Option<Subset<'_>>,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    let mut model = Model::new(descriptor.clone(), config.seed)?;
    model.apply_freeze(config.freeze_ratio)?;
    let report = fit(&mut model, train_set, validation, config, |_| {})?;
    Ok(Checkpoint::new(model, train_set.index.class_names.clone())
        .with_training(config.clone(), report.history))
}

/// Transfers the base of `source` into a fresh model for the target class
/// set: base weights copied, head re-initialized, freeze plan applied to the
/// base, then trained on the target data.
pub fn finetune(
    source: &Checkpoint,
    head: HeadKind,
    target_train: Subset<'_>,
    target_validation: Option<Subset<'_>>,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    let src = source.model.descriptor();
    let desc = src.with_head(head, target_train.index.num_classes())?;
    let mut model = Model::new(desc, config.seed)?;
    transfer_base(&source.model, &mut model)?;
    model.apply_freeze(config.freeze_ratio)?;
    let report = fit(&mut model, target_train, target_validation, config, |_| {})?;
    Ok(Checkpoint::new(model, target_train.index.class_names.clone())
        .with_training(config.clone(), report.history))
}

/// Copies base weights, requiring identical base topology and input shape.
pub fn transfer_base(source: &Model<f32>, target: &mut Model<f32>) -> Result<()> {
    let (s, t) = (source.descriptor(), target.descriptor());
    if s.input_shape != t.input_shape {
        return Err(TrainError::BaseMismatch(format!(
            "input {:?} vs {:?}",
            s.input_shape, t.input_shape
        )));
    }
    if s.base_nodes() != t.base_nodes() {
        return Err(TrainError::BaseMismatch(format!(
            "`{}` base ({} nodes) vs `{}` base ({} nodes)",
            s.name,
            s.base_len,
            t.name,
            t.base_len
        )));
    }
    target.copy_base_from(source);
    Ok(())
}

/// Pretrains on the source data, then fine-tunes on the target data.
pub fn pretrain_then_finetune(
    descriptor: &ArchDescriptor,
    source_train: Subset<'_>,
    target_train: Subset<'_>,
    target_validation: Option<Subset<'_>>,
    source_config: &TrainConfig,
    target_config: &TrainConfig,
) -> Result<(Checkpoint, Checkpoint)> {
    let source_desc = descriptor.with_head(descriptor.head, source_train.index.num_classes())?;
    let mut pre = source_config.clone();
    pre.freeze_ratio = 0.0;
    let source = train(&source_desc, source_train, None, &pre)?;
    let tuned = finetune(&source, descriptor.head, target_train, target_validation, target_config)?;
    Ok((source, tuned))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MacroMetrics,
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

/// Inference-mode evaluation without augmentation.
pub fn evaluate(model: &Model<f32>, subset: Subset<'_>, batch_size: usize) -> Result<Evaluation> {
    check_subset(model, &subset, "evaluation")?;
    let mut config = BatchConfig::new(image_size(model), 0);
    config.shuffle = false;
    config.batch_size = batch_size.max(1);
    let k = model.num_classes();
    let mut confusion = ConfusionMatrix::new(k);
    let mut predictions = Vec::with_capacity(subset.ids.len());
    let mut loss = 0.0;
    for batch in data::make_batches(subset.index, subset.ids, 0, &config) {
        let batch = batch?;
        let probs = model.infer(&batch.images)?;
        loss += cross_entropy(&probs, &batch.labels)?.loss * batch.sample_ids.len() as f64;
        for (row, (&id, &actual)) in batch.sample_ids.iter().zip(&batch.classes).enumerate() {
            let p = &probs.data()[row * k..(row + 1) * k];
            let predicted = crate::tensor::argmax(p);
            confusion.accumulate(actual, predicted)?;
            predictions.push(Prediction {
                sample_id: subset.index.samples[id].source.describe(id),
                actual,
                predicted,
                confidence: p[predicted] as f64,
            });
        }
    }
    Ok(Evaluation {
        metrics: metrics::macro_metrics(&confusion)?,
        confusion,
        loss: loss / subset.ids.len() as f64,
        predictions,
    })
}
