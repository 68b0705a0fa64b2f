//! Convolutional network toolkit for flower-species classification.
//!
//! Dense NHWC tensors and layer kernels with hand-written backward passes
//! sit underneath exact descriptors of MobileNet, DenseNet-121 and Xception
//! plus small trainable variants. Training, sweeps, metrics and the HTTP
//! inference service are built on top.

pub mod arch;
pub mod cli;
pub mod data;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod service;
pub mod tensor;
pub mod train;

pub use arch::{ArchDescriptor, FreezePlan, HeadKind, ParamCounts};
pub use layers::{Layer, LayerKind, LayerNode, Mode, Parameter};
pub use metrics::{ConfusionMatrix, MacroMetrics};
pub use model::Model;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
