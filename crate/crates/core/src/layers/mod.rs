//! Layer kinds, their shape rules, parameter accounting, and the
//! forward/backward kernels.
//!
//! Feature shapes exclude the batch axis: `[H, W, C]` for maps and `[F]`
//! for vectors. Runtime tensors carry the batch axis in front.

mod conv;
mod dense;
mod norm;
mod pool;
mod simple;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("layer `{layer}`: expected input {expected}, got {actual:?}")]
    Shape {
        layer: String,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("layer `{layer}`: expected {expected} input(s), got {actual}")]
    Arity {
        layer: String,
        expected: String,
        actual: usize,
    },
    #[error("layer `{0}`: backward called before a training-mode forward")]
    BackwardBeforeForward(String),
    #[error("layer `{layer}`: {message}")]
    Invalid { layer: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LayerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    Relu6,
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input,
    Conv2D {
        kernel: usize,
        stride: usize,
        padding: Padding,
        filters: usize,
        use_bias: bool,
    },
    DepthwiseConv2D {
        kernel: usize,
        stride: usize,
        padding: Padding,
        use_bias: bool,
    },
    /// Depthwise followed by a 1×1 pointwise convolution, held as one node
    /// with two kernels and no bias.
    SeparableConv2D {
        kernel: usize,
        stride: usize,
        padding: Padding,
        filters: usize,
    },
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    Activation(ActivationKind),
    MaxPool {
        pool: usize,
        stride: usize,
        padding: Padding,
    },
    AvgPool {
        pool: usize,
        stride: usize,
        padding: Padding,
    },
    ZeroPad {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Fully connected layer; with `softmax` the output is a probability row.
    Dense {
        units: usize,
        softmax: bool,
    },
    Softmax,
    /// Channel-axis concatenation.
    Concat,
    Add,
}

impl LayerKind {
    pub fn batch_norm() -> Self {
        LayerKind::BatchNorm {
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::DepthwiseConv2D { .. } => "depthwise_conv2d",
            LayerKind::SeparableConv2D { .. } => "separable_conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Activation(ActivationKind::Relu) => "relu",
            LayerKind::Activation(ActivationKind::Relu6) => "relu6",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::ZeroPad { .. } => "zero_pad",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
            LayerKind::Concat => "concat",
            LayerKind::Add => "add",
        }
    }
}

/// One node of an architecture graph. `inputs` index earlier nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: Vec<usize>) -> Self {
        LayerNode {
            name: name.into(),
            kind,
            inputs,
        }
    }
}

/// Name, shape and role of one parameter tensor, known before allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub moving_stat: bool,
    /// He-uniform fan-in for kernels; `None` means constant initialization.
    pub fan_in: Option<usize>,
    pub init_value: u8,
}

impl ParamSpec {
    fn kernel(name: &'static str, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec {
            name,
            shape,
            moving_stat: false,
            fan_in: Some(fan_in),
            init_value: 0,
        }
    }

    fn constant(name: &'static str, len: usize, value: u8, moving_stat: bool) -> Self {
        ParamSpec {
            name,
            shape: vec![len],
            moving_stat,
            fan_in: None,
            init_value: value,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeParamCount {
    pub total: u64,
    pub trainable: u64,
    pub non_trainable: u64,
}

fn shape_err(layer: &str, expected: impl Into<String>, actual: &[usize]) -> LayerError {
    LayerError::Shape {
        layer: layer.to_string(),
        expected: expected.into(),
        actual: actual.to_vec(),
    }
}

fn arity(layer: &str, expected: &str, actual: usize) -> LayerError {
    LayerError::Arity {
        layer: layer.to_string(),
        expected: expected.to_string(),
        actual,
    }
}

/// Output extent and leading padding along one spatial axis.
pub fn conv_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return None;
    }
    match padding {
        Padding::Valid => {
            if input < kernel {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            // Odd padding puts the extra row/column at the bottom/right.
            Some((out, total / 2))
        }
    }
}

fn map_shape<'a>(name: &str, inputs: &[&'a [usize]]) -> Result<&'a [usize]> {
    if inputs.len() != 1 {
        return Err(arity(name, "1", inputs.len()));
    }
    let s = inputs[0];
    if s.len() != 3 {
        return Err(shape_err(name, "H×W×C feature map", s));
    }
    Ok(s)
}

fn single<'a>(name: &str, inputs: &[&'a [usize]]) -> Result<&'a [usize]> {
    if inputs.len() != 1 {
        return Err(arity(name, "1", inputs.len()));
    }
    Ok(inputs[0])
}

fn spatial(name: &str, s: &[usize], kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    let h = conv_geometry(s[0], kernel, stride, padding)
        .ok_or_else(|| shape_err(name, format!("spatial extent >= {kernel}"), s))?;
    let w = conv_geometry(s[1], kernel, stride, padding)
        .ok_or_else(|| shape_err(name, format!("spatial extent >= {kernel}"), s))?;
    Ok((h.0, w.0))
}

/// Output feature shape of `kind` given its input feature shapes.
pub fn output_shape(name: &str, kind: &LayerKind, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    use LayerKind::*;
    match kind {
        Input => Ok(single(name, inputs)?.to_vec()),
        Conv2D {
            kernel,
            stride,
            padding,
            filters,
            ..
        }
        | SeparableConv2D {
            kernel,
            stride,
            padding,
            filters,
        } => {
            let s = map_shape(name, inputs)?;
            let (h, w) = spatial(name, s, *kernel, *stride, *padding)?;
            Ok(vec![h, w, *filters])
        }
        DepthwiseConv2D {
            kernel,
            stride,
            padding,
            ..
        } => {
            let s = map_shape(name, inputs)?;
            let (h, w) = spatial(name, s, *kernel, *stride, *padding)?;
            Ok(vec![h, w, s[2]])
        }
        MaxPool {
            pool,
            stride,
            padding,
        }
        | AvgPool {
            pool,
            stride,
            padding,
        } => {
            let s = map_shape(name, inputs)?;
            let (h, w) = spatial(name, s, *pool, *stride, *padding)?;
            Ok(vec![h, w, s[2]])
        }
        ZeroPad {
            top,
            bottom,
            left,
            right,
        } => {
            let s = map_shape(name, inputs)?;
            Ok(vec![s[0] + top + bottom, s[1] + left + right, s[2]])
        }
        BatchNorm { .. } | Activation(_) => Ok(single(name, inputs)?.to_vec()),
        Softmax => {
            let s = single(name, inputs)?;
            if s.len() != 1 {
                return Err(shape_err(name, "feature vector", s));
            }
            Ok(s.to_vec())
        }
        GlobalAvgPool => {
            let s = map_shape(name, inputs)?;
            Ok(vec![s[2]])
        }
        Flatten => {
            let s = single(name, inputs)?;
            Ok(vec![s.iter().product()])
        }
        Dense { units, .. } => {
            let s = single(name, inputs)?;
            if s.len() != 1 {
                return Err(shape_err(name, "feature vector (flatten or pool first)", s));
            }
            Ok(vec![*units])
        }
        Concat => {
            if inputs.len() < 2 {
                return Err(arity(name, ">= 2", inputs.len()));
            }
            let first = inputs[0];
            let mut channels = 0;
            for s in inputs {
                if s.len() != first.len() || s[..s.len() - 1] != first[..first.len() - 1] {
                    return Err(shape_err(
                        name,
                        format!("leading extents {:?}", &first[..first.len() - 1]),
                        s,
                    ));
                }
                channels += s[s.len() - 1];
            }
            let mut out = first.to_vec();
            *out.last_mut().unwrap() = channels;
            Ok(out)
        }
        Add => {
            if inputs.len() < 2 {
                return Err(arity(name, ">= 2", inputs.len()));
            }
            for s in &inputs[1..] {
                if *s != inputs[0] {
                    return Err(shape_err(name, format!("{:?}", inputs[0]), s));
                }
            }
            Ok(inputs[0].to_vec())
        }
    }
}

/// Parameter tensors a node owns, in storage order.
pub fn param_specs(kind: &LayerKind, inputs: &[&[usize]]) -> Vec<ParamSpec> {
    use LayerKind::*;
    let channels = || inputs.first().and_then(|s| s.last().copied()).unwrap_or(0);
    match kind {
        Conv2D {
            kernel,
            filters,
            use_bias,
            ..
        } => {
            let cin = channels();
            let mut v = vec![ParamSpec::kernel(
                "kernel",
                vec![*kernel, *kernel, cin, *filters],
                kernel * kernel * cin,
            )];
            if *use_bias {
                v.push(ParamSpec::constant("bias", *filters, 0, false));
            }
            v
        }
        DepthwiseConv2D {
            kernel, use_bias, ..
        } => {
            let c = channels();
            let mut v = vec![ParamSpec::kernel(
                "depthwise_kernel",
                vec![*kernel, *kernel, c],
                kernel * kernel,
            )];
            if *use_bias {
                v.push(ParamSpec::constant("bias", c, 0, false));
            }
            v
        }
        SeparableConv2D {
            kernel, filters, ..
        } => {
            let cin = channels();
            vec![
                ParamSpec::kernel("depthwise_kernel", vec![*kernel, *kernel, cin], kernel * kernel),
                ParamSpec::kernel("pointwise_kernel", vec![1, 1, cin, *filters], cin),
            ]
        }
        BatchNorm { .. } => {
            let c = channels();
            vec![
                ParamSpec::constant("gamma", c, 1, false),
                ParamSpec::constant("beta", c, 0, false),
                ParamSpec::constant("moving_mean", c, 0, true),
                ParamSpec::constant("moving_variance", c, 1, true),
            ]
        }
        Dense { units, .. } => {
            let fin = inputs.first().map(|s| s.iter().product()).unwrap_or(0);
            vec![
                ParamSpec::kernel("kernel", vec![fin, *units], fin),
                ParamSpec::constant("bias", *units, 0, false),
            ]
        }
        _ => Vec::new(),
    }
}

/// Parameter count of one node. Moving statistics are always non-trainable;
/// a frozen node reports everything as non-trainable.
pub fn layer_param_count(kind: &LayerKind, inputs: &[&[usize]], frozen: bool) -> NodeParamCount {
    let mut c = NodeParamCount::default();
    for spec in param_specs(kind, inputs) {
        let n = spec.len() as u64;
        c.total += n;
        if spec.moving_stat || frozen {
            c.non_trainable += n;
        } else {
            c.trainable += n;
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub values: Tensor<T>,
    pub grads: Tensor<T>,
    pub trainable: bool,
    pub moving_stat: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, values: Tensor<T>, moving_stat: bool) -> Self {
        let grads = Tensor::zeros(values.shape()).expect("parameter shape already validated");
        Parameter {
            name: name.into(),
            values,
            grads,
            trainable: !moving_stat,
            moving_stat,
        }
    }

    /// True when an optimizer may change this parameter.
    pub fn is_updatable(&self) -> bool {
        self.trainable && !self.moving_stat
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(T::zero());
    }

    fn accumulate(&mut self, delta: &[T]) {
        if !self.is_updatable() {
            return;
        }
        for (g, &d) in self.grads.data_mut().iter_mut().zip(delta) {
            *g = *g + d;
        }
    }
}

#[derive(Debug, Clone)]
enum Extra<T: Scalar> {
    None,
    /// `inv_std` per channel; `xhat` present when batch statistics were used.
    BatchNorm { xhat: Option<Tensor<T>>, inv_std: Vec<T> },
    MaxPool { argmax: Vec<usize> },
    Separable { mid: Tensor<T> },
    Probabilities(Tensor<T>),
}

#[derive(Debug, Clone)]
struct Cache<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    extra: Extra<T>,
}

/// An executable layer: a node plus its parameters and backward cache.
#[derive(Debug, Clone)]
pub struct Layer<T: Scalar = f32> {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<Parameter<T>>,
    in_shapes: Vec<Vec<usize>>,
    out_shape: Vec<usize>,
    frozen: bool,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Builds the layer for the given input feature shapes and initializes
    /// kernels He-uniform from `rng`; gamma and moving variance start at 1,
    /// everything else at 0.
    pub fn new(node: &LayerNode, input_shapes: &[Vec<usize>], rng: &mut Rng) -> Result<Self> {
        let refs: Vec<&[usize]> = input_shapes.iter().map(|s| s.as_slice()).collect();
        let out_shape = output_shape(&node.name, &node.kind, &refs)?;
        let params = param_specs(&node.kind, &refs)
            .into_iter()
            .map(|spec| {
                let values = match spec.fan_in {
                    Some(fan_in) => {
                        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| T::from_f64(rng.uniform_range(-limit, limit)))
                    }
                    None => Tensor::full(&spec.shape, T::from_f64(spec.init_value as f64)),
                }?;
                Ok(Parameter::new(spec.name, values, spec.moving_stat))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layer {
            name: node.name.clone(),
            kind: node.kind.clone(),
            params,
            in_shapes: input_shapes.to_vec(),
            out_shape,
            frozen: false,
            cache: None,
        })
    }

    pub fn output_feature_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn input_feature_shapes(&self) -> &[Vec<usize>] {
        &self.in_shapes
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Frozen layers keep every parameter fixed; a frozen batch norm also
    /// normalizes with its moving statistics during training.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for p in &mut self.params {
            p.trainable = !frozen && !p.moving_stat;
        }
    }

    pub fn has_trainable_params(&self) -> bool {
        self.params.iter().any(|p| p.is_updatable())
    }

    pub fn param_count(&self) -> NodeParamCount {
        let refs: Vec<&[usize]> = self.in_shapes.iter().map(|s| s.as_slice()).collect();
        layer_param_count(&self.kind, &refs, self.frozen)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn check_inputs(&self, inputs: &[&Tensor<T>]) -> Result<()> {
        if inputs.len() != self.in_shapes.len() {
            return Err(arity(&self.name, &self.in_shapes.len().to_string(), inputs.len()));
        }
        for (x, expected) in inputs.iter().zip(&self.in_shapes) {
            if x.rank() != expected.len() + 1 || &x.shape()[1..] != expected.as_slice() {
                return Err(shape_err(&self.name, format!("N×{expected:?}"), x.shape()));
            }
            if x.shape()[0] != inputs[0].shape()[0] {
                return Err(shape_err(&self.name, "equal batch sizes", x.shape()));
            }
        }
        Ok(())
    }

    fn param(&self, i: usize) -> &[T] {
        self.params[i].values.data()
    }

    /// Forward pass. In training mode the inputs and intermediates are kept
    /// for [`Layer::backward`] and batch norm updates its moving statistics.
    pub fn forward(&mut self, inputs: &[&Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            self.cache = None;
            return self.infer(inputs);
        }
        self.check_inputs(inputs)?;
        let (out, extra) = match self.kind.clone() {
            LayerKind::BatchNorm { momentum, epsilon } if !self.frozen => {
                let r = norm::batch_norm_train(
                    inputs[0],
                    self.param(0),
                    self.param(1),
                    T::from_f64(epsilon),
                )?;
                let m = T::from_f64(momentum);
                let one = T::one();
                for (mm, &bm) in self.params[2].values.data_mut().iter_mut().zip(&r.mean) {
                    *mm = m * *mm + (one - m) * bm;
                }
                for (mv, &bv) in self.params[3].values.data_mut().iter_mut().zip(&r.var) {
                    *mv = m * *mv + (one - m) * bv;
                }
                (
                    r.out,
                    Extra::BatchNorm {
                        xhat: Some(r.xhat),
                        inv_std: r.inv_std,
                    },
                )
            }
            LayerKind::BatchNorm { epsilon, .. } => {
                let inv_std = norm::inv_std(self.param(3), T::from_f64(epsilon));
                let out = norm::batch_norm_affine(inputs[0], self.param(0), self.param(1), self.param(2), &inv_std)?;
                (out, Extra::BatchNorm { xhat: None, inv_std })
            }
            LayerKind::MaxPool {
                pool,
                stride,
                padding,
            } => {
                let (out, argmax) = pool::max_pool(inputs[0], pool, stride, padding, true)?;
                (out, Extra::MaxPool { argmax })
            }
            LayerKind::SeparableConv2D {
                kernel,
                stride,
                padding,
                ..
            } => {
                let mid = conv::depthwise_forward(inputs[0], self.param(0), None, kernel, stride, padding)?;
                let out = conv::conv_forward(&mid, self.param(1), None, 1, 1, Padding::Valid)?;
                (out, Extra::Separable { mid })
            }
            LayerKind::Dense { softmax: true, .. } | LayerKind::Softmax => {
                let out = self.infer_unchecked(inputs)?;
                (out.clone(), Extra::Probabilities(out))
            }
            _ => (self.infer_unchecked(inputs)?, Extra::None),
        };
        self.cache = Some(Cache {
            inputs: inputs.iter().map(|&x| x.clone()).collect(),
            extra,
        });
        Ok(out)
    }

    /// Inference-mode forward; never mutates the layer.
    pub fn infer(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.check_inputs(inputs)?;
        self.infer_unchecked(inputs)
    }

    fn infer_unchecked(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        use LayerKind::*;
        let x = inputs[0];
        Ok(match &self.kind {
            Input => x.clone(),
            Conv2D {
                kernel,
                stride,
                padding,
                use_bias,
                ..
            } => conv::conv_forward(
                x,
                self.param(0),
                use_bias.then(|| self.param(1)),
                *kernel,
                *stride,
                *padding,
            )?,
            DepthwiseConv2D {
                kernel,
                stride,
                padding,
                use_bias,
            } => conv::depthwise_forward(
                x,
                self.param(0),
                use_bias.then(|| self.param(1)),
                *kernel,
                *stride,
                *padding,
            )?,
            SeparableConv2D {
                kernel,
                stride,
                padding,
                ..
            } => {
                let mid = conv::depthwise_forward(x, self.param(0), None, *kernel, *stride, *padding)?;
                conv::conv_forward(&mid, self.param(1), None, 1, 1, Padding::Valid)?
            }
            BatchNorm { epsilon, .. } => {
                let inv_std = norm::inv_std(self.param(3), T::from_f64(*epsilon));
                norm::batch_norm_affine(x, self.param(0), self.param(1), self.param(2), &inv_std)?
            }
            Activation(a) => simple::activation(x, *a),
            MaxPool {
                pool,
                stride,
                padding,
            } => pool::max_pool(x, *pool, *stride, *padding, false)?.0,
            AvgPool {
                pool,
                stride,
                padding,
            } => pool::avg_pool(x, *pool, *stride, *padding)?,
            ZeroPad {
                top,
                bottom,
                left,
                right,
            } => simple::zero_pad(x, *top, *bottom, *left, *right)?,
            GlobalAvgPool => simple::global_avg_pool(x)?,
            Flatten => {
                let n = x.shape()[0];
                x.clone().reshape(&[n, x.len() / n])?
            }
            Dense { softmax, .. } => {
                let logits = dense::dense_forward(x, self.param(0), self.param(1))?;
                if *softmax {
                    simple::softmax_rows(&logits)?
                } else {
                    logits
                }
            }
            Softmax => simple::softmax_rows(x)?,
            Concat => simple::concat_channels(inputs)?,
            Add => {
                let mut out = x.clone();
                for other in &inputs[1..] {
                    out.add_assign(other)?;
                }
                out
            }
        })
    }

    /// Backward pass from the gradient of the loss with respect to this
    /// layer's output. Returns one gradient per input and accumulates
    /// parameter gradients into trainable parameters.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.backward_impl(upstream, false)
    }

    /// Like [`Layer::backward`] for a softmax-headed dense layer, but
    /// `upstream` is already the gradient with respect to the pre-softmax
    /// logits (the fused softmax + cross-entropy path).
    pub fn backward_logits(&mut self, upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if !matches!(self.kind, LayerKind::Dense { softmax: true, .. }) {
            return Err(LayerError::Invalid {
                layer: self.name.clone(),
                message: "logit gradients only apply to a softmax dense head".into(),
            });
        }
        self.backward_impl(upstream, true)
    }

    fn backward_impl(&mut self, upstream: &Tensor<T>, logits: bool) -> Result<Vec<Tensor<T>>> {
        use LayerKind::*;
        let cache = self
            .cache
            .take()
            .ok_or_else(|| LayerError::BackwardBeforeForward(self.name.clone()))?;
        let mut expected = vec![cache.inputs[0].shape()[0]];
        expected.extend_from_slice(&self.out_shape);
        if upstream.shape() != expected.as_slice() {
            let err = shape_err(&self.name, format!("upstream gradient {expected:?}"), upstream.shape());
            self.cache = Some(cache);
            return Err(err);
        }
        let x = &cache.inputs[0];
        let grads = match (&self.kind, &cache.extra) {
            (Input, _) => vec![upstream.clone()],
            (
                Conv2D {
                    kernel,
                    stride,
                    padding,
                    use_bias,
                    ..
                },
                _,
            ) => {
                let g = conv::conv_backward(x, self.param(0), upstream, *kernel, *stride, *padding)?;
                self.params[0].accumulate(g.kernel.data());
                if *use_bias {
                    self.params[1].accumulate(&g.bias);
                }
                vec![g.input]
            }
            (
                DepthwiseConv2D {
                    kernel,
                    stride,
                    padding,
                    use_bias,
                },
                _,
            ) => {
                let g = conv::depthwise_backward(x, self.param(0), upstream, *kernel, *stride, *padding)?;
                self.params[0].accumulate(g.kernel.data());
                if *use_bias {
                    self.params[1].accumulate(&g.bias);
                }
                vec![g.input]
            }
            (
                SeparableConv2D {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Extra::Separable { mid },
            ) => {
                let pw = conv::conv_backward(mid, self.param(1), upstream, 1, 1, Padding::Valid)?;
                let dw = conv::depthwise_backward(x, self.param(0), &pw.input, *kernel, *stride, *padding)?;
                self.params[0].accumulate(dw.kernel.data());
                self.params[1].accumulate(pw.kernel.data());
                vec![dw.input]
            }
            (BatchNorm { .. }, Extra::BatchNorm { xhat, inv_std }) => {
                let g = match xhat {
                    Some(xhat) => norm::batch_norm_backward_train(upstream, xhat, self.param(0), inv_std)?,
                    None => norm::batch_norm_backward_affine(upstream, x, self.param(0), self.param(2), inv_std)?,
                };
                self.params[0].accumulate(&g.dgamma);
                self.params[1].accumulate(&g.dbeta);
                vec![g.input]
            }
            (Activation(a), _) => vec![simple::activation_backward(x, upstream, *a)?],
            (MaxPool { .. }, Extra::MaxPool { argmax }) => {
                vec![pool::max_pool_backward(x.shape(), upstream, argmax)?]
            }
            (
                AvgPool {
                    pool,
                    stride,
                    padding,
                },
                _,
            ) => vec![pool::avg_pool_backward(x.shape(), upstream, *pool, *stride, *padding)?],
            (ZeroPad { top, left, .. }, _) => vec![simple::zero_pad_backward(x.shape(), upstream, *top, *left)?],
            (GlobalAvgPool, _) => vec![simple::global_avg_pool_backward(x.shape(), upstream)?],
            (Flatten, _) => vec![upstream.clone().reshape(x.shape())?],
            (Dense { softmax, .. }, extra) => {
                let dlogits = match (softmax, logits, extra) {
                    (true, false, Extra::Probabilities(p)) => simple::softmax_backward(p, upstream)?,
                    _ => upstream.clone(),
                };
                let g = dense::dense_backward(x, self.param(0), &dlogits)?;
                self.params[0].accumulate(g.kernel.data());
                self.params[1].accumulate(&g.bias);
                vec![g.input]
            }
            (Softmax, Extra::Probabilities(p)) => vec![simple::softmax_backward(p, upstream)?],
            (Concat, _) => simple::concat_backward(&cache.inputs, upstream)?,
            (Add, _) => vec![upstream.clone(); cache.inputs.len()],
            (kind, _) => {
                return Err(LayerError::Invalid {
                    layer: self.name.clone(),
                    message: format!("inconsistent backward cache for {}", kind.type_name()),
                })
            }
        };
        Ok(grads)
    }
}
