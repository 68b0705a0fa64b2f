//! Line-oriented descriptor document.
//!
//! ```text
//! format flora-arch/1
//! name mini_mobilenet
//! input 32 32 3
//! head gap
//! classes 4
//! base 24
//! node conv1 conv2d in=0 kernel=3 stride=2 padding=same filters=8 bias=false
//! ```
//!
//! `head`, `classes` and `base` are optional in base-only documents (the
//! shipped mini descriptors). A node without `in=` reads from the node
//! before it. `batch_norm` momentum/epsilon default to the standard
//! values. `#` starts a comment.

use std::collections::HashMap;
use std::fmt::Write;

use super::{ArchDescriptor, ArchError, HeadKind, Result};
use crate::layers::{ActivationKind, LayerKind, LayerNode, Padding, BN_EPSILON, BN_MOMENTUM};

pub const DESCRIPTOR_FORMAT: &str = "flora-arch/1";

pub(super) struct ParsedBase {
    pub name: Option<String>,
    pub input: Option<[usize; 3]>,
    pub head: Option<HeadKind>,
    pub classes: Option<usize>,
    pub base_len: Option<usize>,
    pub nodes: Vec<LayerNode>,
}

fn padding_str(p: Padding) -> &'static str {
    match p {
        Padding::Same => "same",
        Padding::Valid => "valid",
    }
}

fn kind_fields(kind: &LayerKind) -> String {
    use LayerKind::*;
    match kind {
        Conv2D {
            kernel,
            stride,
            padding,
            filters,
            use_bias,
        } => format!(
            "kernel={kernel} stride={stride} padding={} filters={filters} bias={use_bias}",
            padding_str(*padding)
        ),
        DepthwiseConv2D {
            kernel,
            stride,
            padding,
            use_bias,
        } => format!(
            "kernel={kernel} stride={stride} padding={} bias={use_bias}",
            padding_str(*padding)
        ),
        SeparableConv2D {
            kernel,
            stride,
            padding,
            filters,
        } => format!(
            "kernel={kernel} stride={stride} padding={} filters={filters}",
            padding_str(*padding)
        ),
        BatchNorm { momentum, epsilon } => format!("momentum={momentum} epsilon={epsilon}"),
        MaxPool {
            pool,
            stride,
            padding,
        }
        | AvgPool {
            pool,
            stride,
            padding,
        } => format!("pool={pool} stride={stride} padding={}", padding_str(*padding)),
        ZeroPad {
            top,
            bottom,
            left,
            right,
        } => format!("top={top} bottom={bottom} left={left} right={right}"),
        Dense { units, softmax } => format!("units={units} softmax={softmax}"),
        Input | Activation(_) | GlobalAvgPool | Flatten | Softmax | Concat | Add => String::new(),
    }
}

pub(super) fn write_descriptor(desc: &ArchDescriptor) -> String {
    let mut out = String::new();
    let [h, w, c] = desc.input_shape;
    let _ = writeln!(out, "format {DESCRIPTOR_FORMAT}");
    let _ = writeln!(out, "name {}", desc.name);
    let _ = writeln!(out, "input {h} {w} {c}");
    let _ = writeln!(out, "head {}", desc.head);
    let _ = writeln!(out, "classes {}", desc.num_classes);
    let _ = writeln!(out, "base {}", desc.base_len);
    for node in &desc.nodes {
        let _ = write!(out, "node {} {}", node.name, node.kind.type_name());
        if !node.inputs.is_empty() {
            let ins: Vec<String> = node.inputs.iter().map(|i| i.to_string()).collect();
            let _ = write!(out, " in={}", ins.join(","));
        }
        let fields = kind_fields(&node.kind);
        if !fields.is_empty() {
            let _ = write!(out, " {fields}");
        }
        out.push('\n');
    }
    out
}

struct Fields<'a> {
    line: usize,
    map: HashMap<&'a str, &'a str>,
}

impl Fields<'_> {
    fn err(&self, message: impl Into<String>) -> ArchError {
        ArchError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| self.err(format!("missing field `{key}`")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| self.err(format!("`{key}`: not an integer: {v}")))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| self.err(format!("`{key}`: not a number: {v}")))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.map.contains_key(key) {
            self.f64(key)
        } else {
            Ok(default)
        }
    }

    fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(self.err(format!("`{key}`: not a bool: {v}"))),
        }
    }

    fn padding(&self) -> Result<Padding> {
        match self.raw("padding")? {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            v => Err(self.err(format!("unknown padding `{v}`"))),
        }
    }
}

fn parse_kind(type_name: &str, f: &Fields<'_>) -> Result<LayerKind> {
    use LayerKind::*;
    Ok(match type_name {
        "input" => Input,
        "conv2d" => Conv2D {
            kernel: f.usize("kernel")?,
            stride: f.usize("stride")?,
            padding: f.padding()?,
            filters: f.usize("filters")?,
            use_bias: f.bool("bias")?,
        },
        "depthwise_conv2d" => DepthwiseConv2D {
            kernel: f.usize("kernel")?,
            stride: f.usize("stride")?,
            padding: f.padding()?,
            use_bias: f.bool("bias")?,
        },
        "separable_conv2d" => SeparableConv2D {
            kernel: f.usize("kernel")?,
            stride: f.usize("stride")?,
            padding: f.padding()?,
            filters: f.usize("filters")?,
        },
        "batch_norm" => BatchNorm {
            momentum: f.f64_or("momentum", BN_MOMENTUM)?,
            epsilon: f.f64_or("epsilon", BN_EPSILON)?,
        },
        "relu" => Activation(ActivationKind::Relu),
        "relu6" => Activation(ActivationKind::Relu6),
        "max_pool" => MaxPool {
            pool: f.usize("pool")?,
            stride: f.usize("stride")?,
            padding: f.padding()?,
        },
        "avg_pool" => AvgPool {
            pool: f.usize("pool")?,
            stride: f.usize("stride")?,
            padding: f.padding()?,
        },
        "zero_pad" => ZeroPad {
            top: f.usize("top")?,
            bottom: f.usize("bottom")?,
            left: f.usize("left")?,
            right: f.usize("right")?,
        },
        "global_avg_pool" => GlobalAvgPool,
        "flatten" => Flatten,
        "dense" => Dense {
            units: f.usize("units")?,
            softmax: f.bool("softmax")?,
        },
        "softmax" => Softmax,
        "concat" => Concat,
        "add" => Add,
        other => return Err(f.err(format!("unknown layer type `{other}`"))),
    })
}

pub(super) fn parse_base(doc: &str) -> Result<ParsedBase> {
    let mut parsed = ParsedBase {
        name: None,
        input: None,
        head: None,
        classes: None,
        base_len: None,
        nodes: Vec::new(),
    };
    let mut saw_format = false;
    for (idx, raw) in doc.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ArchError::Parse {
            line: line_no,
            message,
        };
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap();
        let rest: Vec<&str> = tokens.collect();
        let one = |what: &str| -> Result<&str> {
            match rest.as_slice() {
                [v] => Ok(*v),
                _ => Err(err(format!("`{what}` takes exactly one value"))),
            }
        };
        let number = |what: &str| -> Result<usize> {
            one(what)?
                .parse()
                .map_err(|_| err(format!("`{what}` must be an integer")))
        };
        match key {
            "format" => {
                if one("format")? != DESCRIPTOR_FORMAT {
                    return Err(err(format!("unsupported format (expected {DESCRIPTOR_FORMAT})")));
                }
                saw_format = true;
            }
            "name" => parsed.name = Some(one("name")?.to_string()),
            "input" => {
                let dims: Vec<usize> = rest
                    .iter()
                    .map(|v| v.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err("input extents must be integers".into()))?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| err("input takes H W C".into()))?;
                parsed.input = Some(dims);
            }
            "head" => parsed.head = Some(one("head")?.parse().map_err(|e: ArchError| err(e.to_string()))?),
            "classes" => parsed.classes = Some(number("classes")?),
            "base" => parsed.base_len = Some(number("base")?),
            "node" => {
                let [name, type_name, fields @ ..] = rest.as_slice() else {
                    return Err(err("node needs a name and a type".into()));
                };
                let mut map = HashMap::new();
                for field in fields {
                    let (k, v) = field
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key=value, got `{field}`")))?;
                    if map.insert(k, v).is_some() {
                        return Err(err(format!("duplicate field `{k}`")));
                    }
                }
                let f = Fields { line: line_no, map };
                let kind = parse_kind(type_name, &f)?;
                let index = parsed.nodes.len();
                let inputs = match f.map.get("in") {
                    Some(list) => list
                        .split(',')
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| err(format!("bad input list `{list}`")))?,
                    None if kind == LayerKind::Input => vec![],
                    None if index > 0 => vec![index - 1],
                    None => return Err(err("first node must be an input".into())),
                };
                let known = ["in", "kernel", "stride", "padding", "filters", "bias", "momentum", "epsilon", "pool", "top", "bottom", "left", "right", "units", "softmax"];
                if let Some(k) = f.map.keys().find(|k| !known.contains(k)) {
                    return Err(err(format!("unknown field `{k}`")));
                }
                parsed.nodes.push(LayerNode::new(*name, kind, inputs));
            }
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    if !saw_format {
        return Err(ArchError::Parse {
            line: 0,
            message: format!("missing `format {DESCRIPTOR_FORMAT}` line"),
        });
    }
    Ok(parsed)
}

/// Parses a complete descriptor document and re-validates it.
pub fn parse_descriptor(doc: &str) -> Result<ArchDescriptor> {
    let parsed = parse_base(doc)?;
    let missing = |what: &str| ArchError::Parse {
        line: 0,
        message: format!("missing `{what}`"),
    };
    let name = parsed.name.ok_or_else(|| missing("name"))?;
    let input = parsed.input.ok_or_else(|| missing("input"))?;
    let head = parsed.head.ok_or_else(|| missing("head"))?;
    let classes = parsed.classes.ok_or_else(|| missing("classes"))?;
    let base_len = parsed.base_len.ok_or_else(|| missing("base"))?;
    if parsed.nodes.len() != base_len + 2 {
        return Err(ArchError::Parse {
            line: 0,
            message: format!(
                "expected {} nodes (base {base_len} + 2 head), found {}",
                base_len + 2,
                parsed.nodes.len()
            ),
        });
    }
    let desc = ArchDescriptor::from_base(name, input, parsed.nodes[..base_len].to_vec(), head, classes)?;
    if desc.nodes[base_len..] != parsed.nodes[base_len..] {
        return Err(ArchError::Parse {
            line: 0,
            message: "head nodes do not match `head`/`classes`".into(),
        });
    }
    Ok(desc)
}
