//! Checkpoint files.
//!
//! Layout: `FLORCKPT` | version u32 LE | header length u64 LE | JSON header
//! (descriptor document, class names, preprocessing, freeze plan, parameter
//! counts, training config and history, parameter names and shapes) | one
//! tensor record per parameter, in descriptor order.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EpochRecord, TrainConfig};
use crate::arch::{parse_descriptor, ArchError, ParamCounts};
use crate::model::{Model, ModelError};
use crate::tensor::{read_any, write_tensor, AnyTensor};
use crate::tensor::TensorError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FLORCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (this build reads {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated in {0}")]
    Truncated(&'static str),
    #[error("invalid checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint descriptor: {0}")]
    Descriptor(#[from] ArchError),
    #[error("checkpoint holds {found} parameter tensors, descriptor needs {expected}")]
    BlobCount { expected: usize, found: usize },
    #[error("parameter `{param}`: {source}")]
    Blob {
        param: String,
        #[source]
        source: TensorError,
    },
    #[error("parameter `{param}`: stored shape {actual:?}, descriptor expects {expected:?}")]
    BlobShape {
        param: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameter `{param}`: stored as f64, expected f32")]
    Dtype { param: String },
    #[error("parameter counts {actual:?} disagree with header {header:?}")]
    ParamCounts { header: ParamCounts, actual: ParamCounts },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Height, width.
    pub image_size: [usize; 2],
    pub resize: String,
    /// Pixel multiplier applied after decoding 8-bit channels.
    pub scale: f64,
}

impl Preprocessing {
    pub fn for_input(input: [usize; 3]) -> Self {
        Preprocessing {
            image_size: [input[0], input[1]],
            resize: "bilinear".into(),
            scale: 1.0 / 255.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub class_names: Vec<String>,
    pub preprocessing: Preprocessing,
    pub train_config: Option<TrainConfig>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, class_names: Vec<String>) -> Self {
        let preprocessing = Preprocessing::for_input(model.descriptor().input_shape);
        Checkpoint {
            model,
            class_names,
            preprocessing,
            train_config: None,
            history: Vec::new(),
        }
    }

    pub fn with_training(mut self, config: TrainConfig, history: Vec<EpochRecord>) -> Self {
        self.train_config = Some(config);
        self.history = history;
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    descriptor: String,
    class_names: Vec<String>,
    preprocessing: Preprocessing,
    freeze_ratio: f64,
    frozen_nodes: usize,
    param_counts: ParamCounts,
    train_config: Option<TrainConfig>,
    history: Vec<EpochRecord>,
    params: Vec<ParamEntry>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> std::io::Result<()> {
    let model = &ckpt.model;
    let named = model.named_values();
    let plan = model.freeze_plan();
    let header = Header {
        descriptor: model.descriptor().to_text(),
        class_names: ckpt.class_names.clone(),
        preprocessing: ckpt.preprocessing.clone(),
        freeze_ratio: plan.ratio,
        frozen_nodes: plan.frozen_nodes,
        param_counts: model.param_counts(),
        train_config: ckpt.train_config.clone(),
        history: ckpt.history.clone(),
        params: named
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&header).map_err(std::io::Error::other)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in named {
        write_tensor(w, t).map_err(|e| match e {
            TensorError::Io(io) => io,
            other => std::io::Error::other(other),
        })?;
    }
    Ok(())
}

fn read_n<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(n.min(1 << 24));
    r.take(n as u64)
        .read_to_end(&mut buf)
        .map_err(|_| CheckpointError::Truncated(what))?;
    if buf.len() != n {
        return Err(CheckpointError::Truncated(what));
    }
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let magic = read_n(r, 8, "magic")?;
    if magic.as_slice() != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(read_n(r, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = u64::from_le_bytes(read_n(r, 8, "header length")?.try_into().unwrap());
    let json = read_n(r, len as usize, "header")?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let descriptor = parse_descriptor(&header.descriptor)?;
    if header.class_names.len() != descriptor.num_classes {
        return Err(CheckpointError::Header(format!(
            "{} class names for {} outputs",
            header.class_names.len(),
            descriptor.num_classes
        )));
    }

    let mut model = Model::<f32>::new(descriptor, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_values()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let listed: Vec<(String, Vec<usize>)> = header.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    if listed != expected {
        if listed.len() != expected.len() {
            return Err(CheckpointError::BlobCount {
                expected: expected.len(),
                found: listed.len(),
            });
        }
        let (name, _) = listed.iter().zip(&expected).find(|(a, b)| a != b).unwrap().0;
        return Err(CheckpointError::Header(format!("parameter list disagrees with descriptor at `{name}`")));
    }

    let mut values = Vec::with_capacity(expected.len());
    for (i, (name, shape)) in expected.iter().enumerate() {
        let t = match read_any(r) {
            Ok(AnyTensor::F32(t)) => t,
            Ok(AnyTensor::F64(_)) => return Err(CheckpointError::Dtype { param: name.clone() }),
            Err(TensorError::Truncated { actual: 0, .. }) => {
                return Err(CheckpointError::BlobCount {
                    expected: expected.len(),
                    found: i,
                })
            }
            Err(source) => {
                return Err(CheckpointError::Blob {
                    param: name.clone(),
                    source,
                })
            }
        };
        if t.shape() != shape.as_slice() {
            return Err(CheckpointError::BlobShape {
                param: name.clone(),
                expected: shape.clone(),
                actual: t.shape().to_vec(),
            });
        }
        values.push((name.clone(), t));
    }
    let mut extra = 0;
    loop {
        match read_any(r) {
            Ok(_) => extra += 1,
            Err(TensorError::Truncated { actual: 0, .. }) => break,
            Err(_) => {
                extra += 1;
                break;
            }
        }
    }
    if extra > 0 {
        return Err(CheckpointError::BlobCount {
            expected: expected.len(),
            found: expected.len() + extra,
        });
    }
    model.load_values(values)?;
    let plan = model.descriptor().apply_freeze(header.freeze_ratio)?;
    if plan.frozen_nodes != header.frozen_nodes {
        return Err(CheckpointError::Header(format!(
            "freeze ratio {} gives {} frozen nodes, header says {}",
            header.freeze_ratio, plan.frozen_nodes, header.frozen_nodes
        )));
    }
    model.set_freeze_plan(plan);
    let actual = model.param_counts();
    if actual != header.param_counts || actual != model.descriptor().count_parameters(Some(&plan)) {
        return Err(CheckpointError::ParamCounts {
            header: header.param_counts,
            actual,
        });
    }
    Ok(Checkpoint {
        model,
        class_names: header.class_names,
        preprocessing: header.preprocessing,
        train_config: header.train_config,
        history: header.history,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, ckpt).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}

