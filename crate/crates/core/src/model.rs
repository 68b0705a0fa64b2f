//! Executable network: an [`ArchDescriptor`] with allocated layers.

use thiserror::Error;

use crate::arch::{ArchDescriptor, ArchError, FreezePlan, ParamCounts};
use crate::layers::{Layer, LayerError, LayerKind, Mode, Parameter};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input batch has shape {actual:?}, model expects N×{expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("parameter `{0}` missing")]
    MissingParam(String),
    #[error("parameter `{name}`: expected shape {expected:?}, found {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected parameter `{0}`")]
    UnexpectedParam(String),
    #[error("backward called without a training-mode forward pass")]
    NoForward,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// First non-finite value found in a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonFinite {
    pub layer: String,
    pub param: String,
    /// `"value"` or `"grad"`.
    pub which: &'static str,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    descriptor: ArchDescriptor,
    layers: Vec<Layer<T>>,
    plan: FreezePlan,
    /// Node output gradient is required (some trainable parameter upstream
    /// of or at the node).
    needs_grad: Vec<bool>,
    /// Number of consumers per node output (the last node counts one for the
    /// caller).
    consumers: Vec<usize>,
    forward_done: bool,
}

impl<T: Scalar> Model<T> {
    /// Allocates every layer, drawing initial weights in node order from a
    /// generator seeded with `seed`.
    pub fn new(descriptor: ArchDescriptor, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut layers = Vec::with_capacity(descriptor.nodes.len());
        for (i, node) in descriptor.nodes.iter().enumerate() {
            layers.push(Layer::new(node, &descriptor.input_shapes_of(i), &mut rng)?);
        }
        let mut consumers = vec![0; layers.len()];
        for node in &descriptor.nodes {
            for &j in &node.inputs {
                consumers[j] += 1;
            }
        }
        if let Some(last) = consumers.last_mut() {
            *last += 1;
        }
        let mut model = Model {
            descriptor,
            layers,
            plan: FreezePlan::none(),
            needs_grad: Vec::new(),
            consumers,
            forward_done: false,
        };
        model.refresh_needs_grad();
        Ok(model)
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn freeze_plan(&self) -> &FreezePlan {
        &self.plan
    }

    pub fn num_classes(&self) -> usize {
        self.descriptor.num_classes
    }

    /// Freezes `floor(ratio × base nodes)` leading nodes, unfreezing the rest.
    pub fn apply_freeze(&mut self, ratio: f64) -> Result<FreezePlan> {
        let plan = self.descriptor.apply_freeze(ratio)?;
        self.set_freeze_plan(plan);
        Ok(plan)
    }

    pub fn set_freeze_plan(&mut self, plan: FreezePlan) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.set_frozen(i < self.descriptor.base_len && plan.is_frozen(i));
        }
        self.plan = plan;
        self.refresh_needs_grad();
    }

    fn refresh_needs_grad(&mut self) {
        let mut needs = vec![false; self.layers.len()];
        for (i, node) in self.descriptor.nodes.iter().enumerate() {
            needs[i] = self.layers[i].has_trainable_params() || node.inputs.iter().any(|&j| needs[j]);
        }
        self.needs_grad = needs;
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let expected = self.descriptor.input_shape.to_vec();
        if x.rank() != 4 || x.shape()[1..] != expected[..] || x.shape()[0] == 0 {
            return Err(ModelError::InputShape {
                expected,
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the graph. Training mode caches what backward needs and updates
    /// batch-norm moving statistics; inference mode is pure.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Infer {
            self.clear_caches();
            return self.infer(x);
        }
        self.check_input(x)?;
        let n = self.layers.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut remaining = self.consumers.clone();
        for i in 0..n {
            let node = &self.descriptor.nodes[i];
            let out = {
                let ins: Vec<&Tensor<T>> = if node.kind == LayerKind::Input {
                    vec![x]
                } else {
                    node.inputs.iter().map(|&j| outputs[j].as_ref().expect("input still live")).collect()
                };
                if self.needs_grad[i] {
                    self.layers[i].forward(&ins, Mode::Train)?
                } else {
                    // Frozen prefix: same result as training mode, no cache.
                    self.layers[i].clear_cache();
                    self.layers[i].infer(&ins)?
                }
            };
            for &j in &node.inputs {
                remaining[j] -= 1;
                if remaining[j] == 0 {
                    outputs[j] = None;
                }
            }
            outputs[i] = Some(out);
        }
        self.forward_done = true;
        Ok(outputs.pop().flatten().expect("last node output"))
    }

    /// Inference-mode forward pass; never mutates the model.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut remaining = self.consumers.clone();
        for i in 0..n {
            let node = &self.descriptor.nodes[i];
            let out = {
                let ins: Vec<&Tensor<T>> = if node.kind == LayerKind::Input {
                    vec![x]
                } else {
                    node.inputs.iter().map(|&j| outputs[j].as_ref().expect("input still live")).collect()
                };
                self.layers[i].infer(&ins)?
            };
            for &j in &node.inputs {
                remaining[j] -= 1;
                if remaining[j] == 0 {
                    outputs[j] = None;
                }
            }
            outputs[i] = Some(out);
        }
        Ok(outputs.pop().flatten().expect("last node output"))
    }

    /// Backpropagates a gradient with respect to the pre-softmax logits of
    /// the prediction layer (fused softmax + cross-entropy).
    pub fn backward_logits(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        self.backward_impl(dlogits, true)
    }

    /// Backpropagates a gradient with respect to the output probabilities.
    pub fn backward(&mut self, dprobs: &Tensor<T>) -> Result<()> {
        self.backward_impl(dprobs, false)
    }

    fn backward_impl(&mut self, upstream: &Tensor<T>, logits: bool) -> Result<()> {
        if !self.forward_done {
            return Err(ModelError::NoForward);
        }
        self.forward_done = false;
        let n = self.layers.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(upstream.clone());
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            let input_grads = if i == n - 1 && logits {
                self.layers[i].backward_logits(&g)?
            } else {
                self.layers[i].backward(&g)?
            };
            let node = &self.descriptor.nodes[i];
            for (&j, gj) in node.inputs.iter().zip(input_grads) {
                if !self.needs_grad[j] {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gj)?,
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(())
    }

    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
        self.forward_done = false;
    }

    /// All parameters in node order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.layers
            .iter()
            .flat_map(|l| l.params.iter().map(move |p| (l.name.as_str(), p)))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Counts taken from the live parameters and their trainable flags.
    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (_, p) in self.params() {
            let len = p.values.len() as u64;
            c.total += len;
            if p.is_updatable() {
                c.trainable += len;
            } else {
                c.non_trainable += len;
            }
        }
        c
    }

    pub fn locate_non_finite(&self) -> Option<NonFinite> {
        for (layer, p) in self.params() {
            for (which, t) in [("value", &p.values), ("grad", &p.grads)] {
                if !t.is_finite() {
                    return Some(NonFinite {
                        layer: layer.to_string(),
                        param: p.name.clone(),
                        which,
                    });
                }
            }
        }
        None
    }

    /// `layer/param` names and values in node order.
    pub fn named_values(&self) -> Vec<(String, &Tensor<T>)> {
        self.params().map(|(l, p)| (format!("{l}/{}", p.name), &p.values)).collect()
    }

    /// Replaces every parameter value. The list must name each parameter
    /// exactly once with a matching shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = values.into_iter().collect();
        let mut staged = Vec::new();
        for (name, p) in self.named_values() {
            let t = by_name.remove(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != p.shape() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: p.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            staged.push(t);
        }
        if let Some(extra) = by_name.into_keys().min() {
            return Err(ModelError::UnexpectedParam(extra));
        }
        for (p, t) in self.params_mut().into_iter().zip(staged) {
            p.values = t;
        }
        Ok(())
    }

    /// Copies base parameters (matching names and shapes) from another model,
    /// leaving the head untouched. Returns the number of tensors copied.
    pub fn copy_base_from(&mut self, other: &Model<T>) -> usize {
        let mut copied = 0;
        let base_len = self.descriptor.base_len.min(other.descriptor.base_len);
        for (dst, src) in self.layers[..base_len].iter_mut().zip(&other.layers[..base_len]) {
            if dst.name != src.name {
                continue;
            }
            for (pd, ps) in dst.params.iter_mut().zip(&src.params) {
                if pd.name == ps.name && pd.values.shape() == ps.values.shape() {
                    pd.values = ps.values.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Same model in another precision; caches and gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(self.descriptor.clone(), 0)?;
        for (dst, src) in out.layers.iter_mut().zip(&self.layers) {
            for (pd, ps) in dst.params.iter_mut().zip(&src.params) {
                pd.values = ps.values.cast();
            }
        }
        out.set_freeze_plan(self.plan);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_architecture, HeadKind};

    fn mini(name: &str) -> Model<f64> {
        let d = build_architecture(name, [32, 32, 3], 4, HeadKind::Gap).unwrap();
        Model::new(d, 7).unwrap()
    }

    fn batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[n, 32, 32, 3], |_| rng.uniform()).unwrap()
    }

    #[test]
    fn outputs_are_probability_rows() {
        for name in ["mini_mobilenet", "mini_densenet", "mini_xception"] {
            let m = mini(name);
            let p = m.infer(&batch(3, 1)).unwrap();
            assert_eq!(p.shape(), &[3, 4]);
            for row in p.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = mini("mini_xception");
        let b = mini("mini_xception");
        for ((_, pa), (_, pb)) in a.params().zip(b.params()) {
            assert_eq!(pa.values.data(), pb.values.data());
        }
    }

    #[test]
    fn live_counts_match_descriptor() {
        for name in ["mini_mobilenet", "mini_densenet", "mini_xception"] {
            let mut m = mini(name);
            for ratio in [0.0, 0.25, 0.5, 0.75] {
                let plan = m.apply_freeze(ratio).unwrap();
                assert_eq!(m.param_counts(), m.descriptor().count_parameters(Some(&plan)), "{name} {ratio}");
            }
        }
    }

    #[test]
    fn infer_leaves_model_untouched_and_matches_forward_infer() {
        let mut m = mini("mini_mobilenet");
        let x = batch(2, 3);
        let a = m.infer(&x).unwrap();
        let b = m.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = mini("mini_mobilenet");
        let g = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(m.backward_logits(&g), Err(ModelError::NoForward)));
    }

    #[test]
    fn frozen_prefix_gets_no_gradient() {
        let mut m = mini("mini_densenet");
        m.apply_freeze(0.5).unwrap();
        let x = batch(2, 5);
        let p = m.forward(&x, Mode::Train).unwrap();
        let mut g = p.clone();
        g.data_mut()[0] -= 1.0;
        g.data_mut()[5] -= 1.0;
        m.backward_logits(&g).unwrap();
        let frozen = m.freeze_plan().frozen_nodes;
        for layer in &m.layers()[..frozen] {
            for p in &layer.params {
                assert!(p.grads.data().iter().all(|&v| v == 0.0), "{}", layer.name);
            }
        }
        let head = m.layers().last().unwrap();
        assert!(head.params[0].grads.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_wrong_input() {
        let m = mini("mini_mobilenet");
        let x = Tensor::<f64>::zeros(&[1, 16, 16, 3]).unwrap();
        assert!(matches!(m.infer(&x), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn load_values_round_trip_and_errors() {
        let a = mini("mini_mobilenet");
        let mut b = Model::<f64>::new(a.descriptor().clone(), 99).unwrap();
        let values: Vec<_> = a.named_values().into_iter().map(|(n, t)| (n, t.clone())).collect();
        b.load_values(values.clone()).unwrap();
        let x = batch(2, 8);
        assert_eq!(a.infer(&x).unwrap().data(), b.infer(&x).unwrap().data());

        let mut missing = values.clone();
        missing.remove(3);
        assert!(matches!(b.load_values(missing), Err(ModelError::MissingParam(_))));
        let mut wrong = values;
        wrong[0].1 = Tensor::zeros(&[2]).unwrap();
        match b.load_values(wrong) {
            Err(ModelError::ParamShape { name, .. }) => assert_eq!(name, "conv1/kernel"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cast_round_trip_is_close() {
        let m = mini("mini_xception");
        let f: Model<f32> = m.cast().unwrap();
        let x = batch(1, 4);
        let a = m.infer(&x).unwrap();
        let b = f.infer(&x.cast()).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - *v as f64).abs() < 1e-4);
        }
    }
}
