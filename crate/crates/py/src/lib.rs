//! Python module `flora`: architecture counting, training, checkpoint IO,
//! classification and metrics from flora-core.

use std::path::PathBuf;

use flora_core::arch::{build_architecture, default_input_size, HeadKind, ARCH_NAMES};
use flora_core::cli::DataSpec;
use flora_core::data::AugmentConfig;
use flora_core::metrics::{macro_metrics as core_macro_metrics, ConfusionMatrix};
use flora_core::optim::{OptimizerConfig, OptimizerKind};
use flora_core::service::ModelHandle;
use flora_core::train::{self, evaluate, load_checkpoint, save_checkpoint, Checkpoint, Subset, TrainConfig};
use flora_core::{Model as CoreModel, ParamCounts, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(flora, FloraError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    FloraError::new_err(e.to_string())
}

fn parse_head(head: &str) -> PyResult<HeadKind> {
    match head {
        "gap" => Ok(HeadKind::Gap),
        "flatten" => Ok(HeadKind::Flatten),
        other => Err(PyValueError::new_err(format!("unknown head {other:?}; valid: gap, flatten"))),
    }
}

fn parse_optimizer(name: &str) -> PyResult<OptimizerKind> {
    name.parse().map_err(|_| {
        let names: Vec<&str> = OptimizerKind::ALL.iter().map(|k| k.as_str()).collect();
        PyValueError::new_err(format!("unknown optimizer {name:?}; valid names: {}", names.join(", ")))
    })
}

fn counts_dict<'py>(py: Python<'py>, c: ParamCounts) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("total", c.total)?;
    d.set_item("trainable", c.trainable)?;
    d.set_item("non_trainable", c.non_trainable)?;
    Ok(d)
}

/// Names accepted by `arch` arguments.
#[pyfunction]
fn architectures() -> Vec<&'static str> {
    ARCH_NAMES.to_vec()
}

/// Names accepted by `optimizer` arguments.
#[pyfunction]
fn optimizers() -> Vec<&'static str> {
    OptimizerKind::ALL.iter().map(|k| k.as_str()).collect()
}

/// Layer and parameter counts of an architecture; no weights are allocated.
#[pyfunction]
#[pyo3(signature = (arch, head = "gap", classes = 16, freeze = 0.0, input_size = None))]
fn param_count<'py>(
    py: Python<'py>,
    arch: &str,
    head: &str,
    classes: usize,
    freeze: f64,
    input_size: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let size = input_size.unwrap_or_else(|| default_input_size(arch));
    let desc = build_architecture(arch, [size, size, 3], classes, parse_head(head)?).map_err(err)?;
    let plan = desc.apply_freeze(freeze).map_err(err)?;
    let d = counts_dict(py, desc.count_parameters(Some(&plan)))?;
    d.set_item("layers", desc.count_layers())?;
    d.set_item("frozen_layers", plan.frozen_nodes)?;
    d.set_item("input_size", size)?;
    Ok(d)
}

/// Macro metrics of a confusion matrix given as rows of counts
/// (row = actual class, column = predicted class).
#[pyfunction]
fn macro_metrics<'py>(py: Python<'py>, matrix: Vec<Vec<u64>>) -> PyResult<Bound<'py, PyDict>> {
    let k = matrix.len();
    if k == 0 || matrix.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("matrix must be square and non-empty"));
    }
    let m = core_macro_metrics(&ConfusionMatrix::from_rows(&matrix)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy_eq1", m.accuracy_eq1)?;
    d.set_item("specificity", m.specificity)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("error_rate", m.error_rate)?;
    d.set_item("f1", m.f1)?;
    d.set_item("top1_accuracy", m.top1_accuracy)?;
    d.set_item("warnings", m.warnings)?;
    Ok(d)
}

/// A trained or freshly initialized network with its class names.
#[pyclass(module = "flora", frozen)]
struct Model {
    handle: ModelHandle,
}

impl Model {
    fn ckpt(&self) -> &Checkpoint {
        self.handle.checkpoint()
    }
}

#[pymethods]
impl Model {
    /// Seeded random initialization. Class names default to class_00, class_01, ...
    #[staticmethod]
    #[pyo3(signature = (arch, classes, head = "gap", input_size = None, seed = 0, class_names = None))]
    fn init(
        arch: &str,
        classes: usize,
        head: &str,
        input_size: Option<usize>,
        seed: u64,
        class_names: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let size = input_size.unwrap_or_else(|| default_input_size(arch));
        let names = class_names.unwrap_or_else(|| (0..classes).map(|i| format!("class_{i:02}")).collect());
        if names.len() != classes {
            return Err(PyValueError::new_err(format!("{} class names for {classes} classes", names.len())));
        }
        let desc = build_architecture(arch, [size, size, 3], classes, parse_head(head)?).map_err(err)?;
        let model = CoreModel::new(desc, seed).map_err(err)?;
        Ok(Model {
            handle: ModelHandle::new(Checkpoint::new(model, names)),
        })
    }

    /// Reads a checkpoint, re-verifying its parameter counts.
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let ckpt = py.detach(|| load_checkpoint(&path)).map_err(err)?;
        Ok(Model {
            handle: ModelHandle::new(ckpt),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, self.ckpt()).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.handle.name().to_string()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.handle.class_names().to_vec()
    }

    /// (height, width, channels)
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let [h, w, c] = self.ckpt().model.descriptor().input_shape;
        (h, w, c)
    }

    #[getter]
    fn frozen_layers(&self) -> usize {
        self.ckpt().model.freeze_plan().frozen_nodes
    }

    /// Per-epoch records of the run that produced this model.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.ckpt()
            .history
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("epoch", r.epoch)?;
                d.set_item("train_loss", r.train_loss)?;
                d.set_item("train_acc", r.train_acc)?;
                d.set_item("val_loss", r.val_loss)?;
                d.set_item("val_acc", r.val_acc)?;
                Ok(d)
            })
            .collect()
    }

    fn param_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        counts_dict(py, self.ckpt().model.param_counts())
    }

    /// The architecture in its text descriptor format.
    fn descriptor(&self) -> String {
        self.ckpt().model.descriptor().to_text()
    }

    /// Class probabilities for a batch of images given as a flat NHWC list
    /// of floats in [0, 1]; returns one row per image.
    fn predict(&self, py: Python<'_>, pixels: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let [h, w, c] = self.ckpt().model.descriptor().input_shape;
        let per = h * w * c;
        if pixels.is_empty() || pixels.len() % per != 0 {
            return Err(PyValueError::new_err(format!(
                "expected a multiple of {h}*{w}*{c} = {per} values, got {}",
                pixels.len()
            )));
        }
        let n = pixels.len() / per;
        let x = Tensor::new(&[n, h, w, c], pixels).map_err(err)?;
        let probs = py.detach(|| self.ckpt().model.infer(&x)).map_err(err)?;
        Ok(probs.data().chunks(self.ckpt().model.num_classes()).map(<[f32]>::to_vec).collect())
    }

    /// Top-k (class name, probability) pairs for encoded image bytes.
    #[pyo3(signature = (image, k = 3))]
    fn classify(&self, py: Python<'_>, image: &[u8], k: usize) -> PyResult<Vec<(String, f64)>> {
        let bytes = image.to_vec();
        let resp = py.detach(|| self.handle.classify(&bytes, k)).map_err(err)?;
        Ok(resp.top_k.into_iter().map(|s| (s.class, s.probability)).collect())
    }

    /// Forward-pass timing statistics in milliseconds.
    #[pyo3(signature = (runs = 100, warmup = 10))]
    fn benchmark<'py>(&self, py: Python<'py>, runs: usize, warmup: usize) -> PyResult<Bound<'py, PyDict>> {
        let r = py.detach(|| self.handle.benchmark(runs, warmup)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("device", r.device)?;
        d.set_item("runs", r.runs)?;
        d.set_item("warmup", r.warmup)?;
        d.set_item("avg_ms", r.avg_ms)?;
        d.set_item("p50_ms", r.p50_ms)?;
        d.set_item("p95_ms", r.p95_ms)?;
        d.set_item("min_ms", r.min_ms)?;
        d.set_item("max_ms", r.max_ms)?;
        Ok(d)
    }

    /// Inference-mode metrics on a dataset directory or `synth:CxNxS[:seed]`.
    #[pyo3(signature = (data, batch_size = 32))]
    fn evaluate<'py>(&self, py: Python<'py>, data: &str, batch_size: usize) -> PyResult<Bound<'py, PyDict>> {
        let spec: DataSpec = data.parse().map_err(PyValueError::new_err)?;
        let eval = py
            .detach(|| -> Result<_, String> {
                let index = spec.load().map_err(|e| e.to_string())?;
                let ids: Vec<usize> = (0..index.len()).collect();
                evaluate(&self.ckpt().model, Subset::new(&index, &ids), batch_size).map_err(|e| e.to_string())
            })
            .map_err(err)?;
        let d = macro_metrics(py, {
            let k = eval.confusion.size();
            (0..k).map(|i| (0..k).map(|j| eval.confusion.get(i, j)).collect()).collect()
        })?;
        d.set_item("loss", eval.loss)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = self.ckpt().model.param_counts();
        format!(
            "Model(name={:?}, classes={}, parameters={})",
            self.handle.name(),
            self.handle.class_names().len(),
            c.total
        )
    }
}

/// Trains a model on a dataset directory or `synth:CxNxS[:seed]` and
/// returns it; the whole dataset is used for training.
#[pyfunction]
#[pyo3(signature = (arch, data, optimizer = "sgd", lr = None, epochs = 50, batch_size = 32, freeze = 0.0, head = "gap", seed = 0, input_size = None, augment = false))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    py: Python<'_>,
    arch: &str,
    data: &str,
    optimizer: &str,
    lr: Option<f64>,
    epochs: usize,
    batch_size: usize,
    freeze: f64,
    head: &str,
    seed: u64,
    input_size: Option<usize>,
    augment: bool,
) -> PyResult<Model> {
    let spec: DataSpec = data.parse().map_err(PyValueError::new_err)?;
    let mut opt = OptimizerConfig::new(parse_optimizer(optimizer)?);
    if let Some(lr) = lr {
        opt = opt.with_learning_rate(lr);
    }
    let config = TrainConfig {
        epochs,
        batch_size,
        optimizer: opt,
        freeze_ratio: freeze,
        seed,
        augment: augment.then(AugmentConfig::standard),
        augment_validation: true,
    };
    let head = parse_head(head)?;
    let size = input_size.unwrap_or_else(|| default_input_size(arch));
    let ckpt = py
        .detach(|| -> Result<Checkpoint, String> {
            let index = spec.load().map_err(|e| e.to_string())?;
            let ids: Vec<usize> = (0..index.len()).collect();
            let desc = build_architecture(arch, [size, size, 3], index.num_classes(), head).map_err(|e| e.to_string())?;
            let mut ckpt = train::train(&desc, Subset::new(&index, &ids), None, &config).map_err(|e| e.to_string())?;
            ckpt.class_names = index.class_names.clone();
            Ok(ckpt)
        })
        .map_err(err)?;
    Ok(Model {
        handle: ModelHandle::new(ckpt),
    })
}

#[pymodule]
fn flora(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FloraError", m.py().get_type::<FloraError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(architectures, m)?)?;
    m.add_function(wrap_pyfunction!(optimizers, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(macro_metrics, m)?)?;
    let train_fn = wrap_pyfunction!(train_model, m)?;
    m.add("train", train_fn)?;
    Ok(())
}
