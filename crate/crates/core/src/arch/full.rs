//! Full-size bases. Node order and naming follow the reference Keras
//! application graphs, since frozen-prefix totals depend on that order.

use crate::layers::{ActivationKind, LayerKind, LayerNode, Padding};

struct Graph {
    nodes: Vec<LayerNode>,
}

impl Graph {
    fn new() -> Self {
        Graph {
            nodes: vec![LayerNode::new("input", LayerKind::Input, vec![])],
        }
    }

    fn last(&self) -> usize {
        self.nodes.len() - 1
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> usize {
        self.nodes.push(LayerNode::new(name, kind, inputs));
        self.last()
    }

    fn then(&mut self, name: impl Into<String>, kind: LayerKind) -> usize {
        let prev = self.last();
        self.push(name, kind, vec![prev])
    }
}

fn conv(kernel: usize, stride: usize, padding: Padding, filters: usize) -> LayerKind {
    LayerKind::Conv2D {
        kernel,
        stride,
        padding,
        filters,
        use_bias: false,
    }
}

fn sep(filters: usize) -> LayerKind {
    LayerKind::SeparableConv2D {
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
        filters,
    }
}

const RELU: LayerKind = LayerKind::Activation(ActivationKind::Relu);
const RELU6: LayerKind = LayerKind::Activation(ActivationKind::Relu6);

fn max_pool_same() -> LayerKind {
    LayerKind::MaxPool {
        pool: 3,
        stride: 2,
        padding: Padding::Same,
    }
}

/// MobileNet v1, width multiplier 1: 86 nodes.
pub(super) fn mobilenet() -> Vec<LayerNode> {
    let mut g = Graph::new();
    g.then("conv1", conv(3, 2, Padding::Same, 32));
    g.then("conv1_bn", LayerKind::batch_norm());
    g.then("conv1_relu", RELU6);
    let blocks: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    for (i, &(filters, stride)) in blocks.iter().enumerate() {
        let id = i + 1;
        let padding = if stride == 1 {
            Padding::Same
        } else {
            g.then(
                format!("conv_pad_{id}"),
                LayerKind::ZeroPad {
                    top: 0,
                    bottom: 1,
                    left: 0,
                    right: 1,
                },
            );
            Padding::Valid
        };
        g.then(
            format!("conv_dw_{id}"),
            LayerKind::DepthwiseConv2D {
                kernel: 3,
                stride,
                padding,
                use_bias: false,
            },
        );
        g.then(format!("conv_dw_{id}_bn"), LayerKind::batch_norm());
        g.then(format!("conv_dw_{id}_relu"), RELU6);
        g.then(format!("conv_pw_{id}"), conv(1, 1, Padding::Same, filters));
        g.then(format!("conv_pw_{id}_bn"), LayerKind::batch_norm());
        g.then(format!("conv_pw_{id}_relu"), RELU6);
    }
    g.nodes
}

const DENSENET_BN_EPSILON: f64 = 1.001e-5;

fn dn_bn() -> LayerKind {
    LayerKind::BatchNorm {
        momentum: crate::layers::BN_MOMENTUM,
        epsilon: DENSENET_BN_EPSILON,
    }
}

/// DenseNet-121 (growth 32, blocks 6/12/24/16, compression 0.5): 427 nodes.
pub(super) fn densenet121() -> Vec<LayerNode> {
    const GROWTH: usize = 32;
    let mut g = Graph::new();
    g.then(
        "zero_padding2d",
        LayerKind::ZeroPad {
            top: 3,
            bottom: 3,
            left: 3,
            right: 3,
        },
    );
    g.then("conv1_conv", conv(7, 2, Padding::Valid, 64));
    g.then("conv1_bn", dn_bn());
    g.then("conv1_relu", RELU);
    g.then(
        "zero_padding2d_1",
        LayerKind::ZeroPad {
            top: 1,
            bottom: 1,
            left: 1,
            right: 1,
        },
    );
    g.then(
        "pool1",
        LayerKind::MaxPool {
            pool: 3,
            stride: 2,
            padding: Padding::Valid,
        },
    );
    let mut channels = 64;
    for (stage, &blocks) in [6usize, 12, 24, 16].iter().enumerate() {
        let s = stage + 2;
        for b in 1..=blocks {
            let block_in = g.last();
            g.then(format!("conv{s}_block{b}_0_bn"), dn_bn());
            g.then(format!("conv{s}_block{b}_0_relu"), RELU);
            g.then(format!("conv{s}_block{b}_1_conv"), conv(1, 1, Padding::Same, 4 * GROWTH));
            g.then(format!("conv{s}_block{b}_1_bn"), dn_bn());
            g.then(format!("conv{s}_block{b}_1_relu"), RELU);
            let new = g.then(format!("conv{s}_block{b}_2_conv"), conv(3, 1, Padding::Same, GROWTH));
            g.push(format!("conv{s}_block{b}_concat"), LayerKind::Concat, vec![block_in, new]);
            channels += GROWTH;
        }
        if s < 5 {
            channels /= 2;
            g.then(format!("pool{s}_bn"), dn_bn());
            g.then(format!("pool{s}_relu"), RELU);
            g.then(format!("pool{s}_conv"), conv(1, 1, Padding::Same, channels));
            g.then(
                format!("pool{s}_pool"),
                LayerKind::AvgPool {
                    pool: 2,
                    stride: 2,
                    padding: Padding::Valid,
                },
            );
        }
    }
    g.then("bn", dn_bn());
    g.then("relu", RELU);
    g.nodes
}

/// Xception: 132 nodes (each separable convolution is one node).
pub(super) fn xception() -> Vec<LayerNode> {
    let mut g = Graph::new();
    g.then("block1_conv1", conv(3, 2, Padding::Valid, 32));
    g.then("block1_conv1_bn", LayerKind::batch_norm());
    g.then("block1_conv1_act", RELU);
    g.then("block1_conv2", conv(3, 1, Padding::Valid, 64));
    g.then("block1_conv2_bn", LayerKind::batch_norm());
    let mut x = g.then("block1_conv2_act", RELU);

    // Entry flow: blocks 2-4 downsample with a strided 1×1 residual branch.
    let mut residual_id = 0;
    for (block, filters) in [(2usize, 128usize), (3, 256), (4, 728)] {
        if block > 2 {
            g.then(format!("block{block}_sepconv1_act"), RELU);
        }
        g.then(format!("block{block}_sepconv1"), sep(filters));
        g.then(format!("block{block}_sepconv1_bn"), LayerKind::batch_norm());
        g.then(format!("block{block}_sepconv2_act"), RELU);
        g.then(format!("block{block}_sepconv2"), sep(filters));
        let main = g.then(format!("block{block}_sepconv2_bn"), LayerKind::batch_norm());
        x = downsample_merge(&mut g, x, main, block, filters, &mut residual_id);
    }

    // Middle flow: eight identity-residual blocks.
    for block in 5..=12 {
        for k in 1..=3 {
            g.then(format!("block{block}_sepconv{k}_act"), RELU);
            g.then(format!("block{block}_sepconv{k}"), sep(728));
            g.then(format!("block{block}_sepconv{k}_bn"), LayerKind::batch_norm());
        }
        let main = g.last();
        x = g.push(format!("add_{}", block - 2), LayerKind::Add, vec![main, x]);
    }

    // Exit flow.
    g.then("block13_sepconv1_act", RELU);
    g.then("block13_sepconv1", sep(728));
    g.then("block13_sepconv1_bn", LayerKind::batch_norm());
    g.then("block13_sepconv2_act", RELU);
    g.then("block13_sepconv2", sep(1024));
    let main = g.then("block13_sepconv2_bn", LayerKind::batch_norm());
    downsample_merge(&mut g, x, main, 13, 1024, &mut residual_id);

    g.then("block14_sepconv1", sep(1536));
    g.then("block14_sepconv1_bn", LayerKind::batch_norm());
    g.then("block14_sepconv1_act", RELU);
    g.then("block14_sepconv2", sep(2048));
    g.then("block14_sepconv2_bn", LayerKind::batch_norm());
    g.then("block14_sepconv2_act", RELU);
    g.nodes
}

/// Residual 1×1/2 conv on `shortcut`, max pool on `main`, BN, then add;
/// emitted in reference order (conv, pool, bn, add).
fn downsample_merge(g: &mut Graph, shortcut: usize, main: usize, block: usize, filters: usize, id: &mut usize) -> usize {
    let suffix = |base: &str, id: usize| if id == 0 { base.to_string() } else { format!("{base}_{id}") };
    let res = g.push(suffix("conv2d", *id), conv(1, 2, Padding::Same, filters), vec![shortcut]);
    let pool = g.push(format!("block{block}_pool"), max_pool_same(), vec![main]);
    let bn = g.push(suffix("batch_normalization", *id), LayerKind::batch_norm(), vec![res]);
    let add_name = match block {
        13 => "add_11".to_string(),
        _ => suffix("add", *id),
    };
    *id += 1;
    g.push(add_name, LayerKind::Add, vec![pool, bn])
}
