//! Architecture descriptors, parameter/layer accounting and freeze plans.
//!
//! A descriptor is an ordered node list (topological, explicit input edges)
//! made of a *base* (the convolutional feature extractor) followed by a
//! two-node head: a vectorizer (global average pooling or flatten) and a
//! softmax dense layer. Counting works on shapes alone, so full-size
//! descriptors never allocate weights.

mod full;
mod text;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::layers::{self, LayerError, LayerKind, LayerNode};

pub use text::{parse_descriptor, DESCRIPTOR_FORMAT};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("unknown architecture `{0}` (expected one of: {names})", names = ARCH_NAMES.join(", "))]
    UnknownName(String),
    #[error("{arch}: incompatible input shape {shape:?}: {reason}")]
    IncompatibleInput {
        arch: String,
        shape: [usize; 3],
        reason: String,
    },
    #[error("num_classes must be >= 2, got {0}")]
    TooFewClasses(usize),
    #[error("freeze ratio must lie in [0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("unknown head `{0}` (expected gap or flatten)")]
    UnknownHead(String),
    #[error("descriptor line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("node {index} (`{name}`): {message}")]
    Graph {
        index: usize,
        name: String,
        message: String,
    },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

pub type Result<T, E = ArchError> = std::result::Result<T, E>;

pub const ARCH_NAMES: [&str; 6] = [
    "mobilenet",
    "densenet121",
    "xception",
    "mini_mobilenet",
    "mini_densenet",
    "mini_xception",
];

const MINI_MOBILENET: &str = include_str!("../../descriptors/mini_mobilenet.arch");
const MINI_DENSENET: &str = include_str!("../../descriptors/mini_densenet.arch");
const MINI_XCEPTION: &str = include_str!("../../descriptors/mini_xception.arch");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Gap,
    Flatten,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Gap => "gap",
            HeadKind::Flatten => "flatten",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gap" => Ok(HeadKind::Gap),
            "flatten" => Ok(HeadKind::Flatten),
            _ => Err(ArchError::UnknownHead(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCounts {
    pub total: u64,
    pub trainable: u64,
    pub non_trainable: u64,
}

/// Which base nodes are excluded from training: always a prefix from the
/// input side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreezePlan {
    pub ratio: f64,
    pub frozen_nodes: usize,
}

impl FreezePlan {
    pub fn none() -> Self {
        FreezePlan {
            ratio: 0.0,
            frozen_nodes: 0,
        }
    }

    pub fn frozen_node_indices(&self) -> std::ops::Range<usize> {
        0..self.frozen_nodes
    }

    pub fn is_frozen(&self, node: usize) -> bool {
        node < self.frozen_nodes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchDescriptor {
    pub name: String,
    pub input_shape: [usize; 3],
    pub nodes: Vec<LayerNode>,
    /// Number of leading nodes forming the base; the rest is the head.
    pub base_len: usize,
    pub head: HeadKind,
    pub num_classes: usize,
    shapes: Vec<Vec<usize>>,
}

impl ArchDescriptor {
    /// Assembles a descriptor from base nodes, appending the head and
    /// validating the whole graph's shape algebra.
    pub fn from_base(
        name: impl Into<String>,
        input_shape: [usize; 3],
        base: Vec<LayerNode>,
        head: HeadKind,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(ArchError::TooFewClasses(num_classes));
        }
        let mut nodes = base;
        let base_len = nodes.len();
        if base_len == 0 || nodes[0].kind != LayerKind::Input {
            return Err(ArchError::Graph {
                index: 0,
                name: nodes.first().map(|n| n.name.clone()).unwrap_or_default(),
                message: "first node must be the input".into(),
            });
        }
        let last = base_len - 1;
        let (vec_name, vec_kind) = match head {
            HeadKind::Gap => ("head_gap", LayerKind::GlobalAvgPool),
            HeadKind::Flatten => ("head_flatten", LayerKind::Flatten),
        };
        nodes.push(LayerNode::new(vec_name, vec_kind, vec![last]));
        nodes.push(LayerNode::new(
            "predictions",
            LayerKind::Dense {
                units: num_classes,
                softmax: true,
            },
            vec![last + 1],
        ));
        let shapes = infer_shapes(&nodes, input_shape)?;
        Ok(ArchDescriptor {
            name: name.into(),
            input_shape,
            nodes,
            base_len,
            head,
            num_classes,
            shapes,
        })
    }

    /// Same base with a fresh head.
    pub fn with_head(&self, head: HeadKind, num_classes: usize) -> Result<Self> {
        Self::from_base(
            self.name.clone(),
            self.input_shape,
            self.nodes[..self.base_len].to_vec(),
            head,
            num_classes,
        )
    }

    pub fn base_nodes(&self) -> &[LayerNode] {
        &self.nodes[..self.base_len]
    }

    /// Output feature shape of every node.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn input_shapes_of(&self, index: usize) -> Vec<Vec<usize>> {
        input_shapes(&self.nodes, &self.shapes, self.input_shape, index)
    }

    /// Final feature map before the head vectorizer.
    pub fn feature_shape(&self) -> &[usize] {
        &self.shapes[self.base_len - 1]
    }

    pub fn count_layers(&self) -> usize {
        self.base_len
    }

    pub fn count_parameters(&self, plan: Option<&FreezePlan>) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (i, node) in self.nodes.iter().enumerate() {
            let ins = self.input_shapes_of(i);
            let refs: Vec<&[usize]> = ins.iter().map(|s| s.as_slice()).collect();
            let frozen = i < self.base_len && plan.is_some_and(|p| p.is_frozen(i));
            let n = layers::layer_param_count(&node.kind, &refs, frozen);
            c.total += n.total;
            c.trainable += n.trainable;
            c.non_trainable += n.non_trainable;
        }
        c
    }

    /// Freeze plan covering `floor(ratio × base node count)` nodes.
    pub fn apply_freeze(&self, ratio: f64) -> Result<FreezePlan> {
        if !(0.0..1.0).contains(&ratio) || ratio.is_nan() {
            return Err(ArchError::InvalidRatio(ratio));
        }
        let frozen = (ratio * self.base_len as f64 + 1e-9).floor() as usize;
        Ok(FreezePlan {
            ratio,
            frozen_nodes: frozen.min(self.base_len),
        })
    }

    /// Serializes to the line-oriented descriptor document.
    pub fn to_text(&self) -> String {
        text::write_descriptor(self)
    }

    pub fn is_full_size(&self) -> bool {
        matches!(self.name.as_str(), "mobilenet" | "densenet121" | "xception")
    }
}

fn input_shapes(nodes: &[LayerNode], shapes: &[Vec<usize>], input: [usize; 3], index: usize) -> Vec<Vec<usize>> {
    if nodes[index].kind == LayerKind::Input {
        return vec![input.to_vec()];
    }
    nodes[index].inputs.iter().map(|&j| shapes[j].clone()).collect()
}

fn infer_shapes(nodes: &[LayerNode], input: [usize; 3]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        let graph_err = |message: String| ArchError::Graph {
            index: i,
            name: node.name.clone(),
            message,
        };
        if node.kind == LayerKind::Input {
            if i != 0 {
                return Err(graph_err("input node must come first".into()));
            }
        } else {
            if node.inputs.is_empty() {
                return Err(graph_err("node has no inputs".into()));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&j| j >= i) {
                return Err(graph_err(format!("input {bad} is not an earlier node")));
            }
        }
        let ins = input_shapes(nodes, &shapes, input, i);
        let refs: Vec<&[usize]> = ins.iter().map(|s| s.as_slice()).collect();
        shapes.push(layers::output_shape(&node.name, &node.kind, &refs)?);
    }
    Ok(shapes)
}

/// Builds one of the named architectures.
///
/// Full-size bases accept 224 or 299 square RGB input; mini variants accept
/// any square input of at least 32.
pub fn build_architecture(name: &str, input_shape: [usize; 3], num_classes: usize, head: HeadKind) -> Result<ArchDescriptor> {
    let incompatible = |reason: &str| ArchError::IncompatibleInput {
        arch: name.to_string(),
        shape: input_shape,
        reason: reason.to_string(),
    };
    let [h, w, c] = input_shape;
    if h != w {
        return Err(incompatible("input must be square"));
    }
    if c != 3 {
        return Err(incompatible("input must have 3 channels"));
    }
    let base = match name {
        "mobilenet" | "densenet121" | "xception" => {
            if h != 224 && h != 299 {
                return Err(incompatible("full-size architectures take 224 or 299 input"));
            }
            match name {
                "mobilenet" => full::mobilenet(),
                "densenet121" => full::densenet121(),
                _ => full::xception(),
            }
        }
        "mini_mobilenet" | "mini_densenet" | "mini_xception" => {
            if h < 32 {
                return Err(incompatible("mini architectures need input >= 32"));
            }
            let doc = match name {
                "mini_mobilenet" => MINI_MOBILENET,
                "mini_densenet" => MINI_DENSENET,
                _ => MINI_XCEPTION,
            };
            text::parse_base(doc)?.nodes
        }
        other => return Err(ArchError::UnknownName(other.to_string())),
    };
    ArchDescriptor::from_base(name, input_shape, base, head, num_classes)
}

/// Canonical input side for an architecture name.
pub fn default_input_size(name: &str) -> usize {
    match name {
        "mobilenet" | "densenet121" => 224,
        "xception" => 299,
        _ => 32,
    }
}
