//! Central finite-difference checks of every backward pass (f64, h = 1e-5).

use flora_core::arch::{build_architecture, HeadKind};
use flora_core::layers::{ActivationKind, Layer, LayerKind, LayerNode, Mode, Padding};
use flora_core::train::cross_entropy;
use flora_core::{Model, Rng, Tensor};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CE_TOL: f64 = 1e-6;

pub type Outcome = Result<f64, String>;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Values bounded away from the relu/relu6 kinks and mutually distinct, so
/// a perturbation of `H` never crosses a non-differentiable point.
fn smooth_values(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| -1.5 + 3.0 * (i as f64 + 0.5) / n as f64).collect();
    rng.shuffle(&mut v);
    v.iter().map(|x| x + rng.uniform_range(-0.2, 0.2) / n as f64).collect()
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, smooth_values(rng, n)).unwrap()
}

fn loss(layer: &mut Layer<f64>, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> f64 {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = layer.forward(&refs, Mode::Train).unwrap();
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Checks input and trainable-parameter gradients of one layer instance.
/// Returns the worst relative error seen.
fn check(layer: &mut Layer<f64>, inputs: Vec<Tensor<f64>>, rng: &mut Rng, label: &str) -> Outcome {
    let fail = |m: String| Err(format!("{label}: {m}"));
    let mut worst = 0.0f64;
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = layer.forward(&refs, Mode::Train).unwrap();
    let r = random_tensor(rng, out.shape());
    for p in &mut layer.params {
        p.zero_grad();
    }
    let _ = layer.forward(&refs, Mode::Train).unwrap();
    let dins = layer.backward(&r).unwrap();
    if dins.len() != inputs.len() {
        return fail(format!("{} input grads for {} inputs", dins.len(), inputs.len()));
    }

    let mut inputs = inputs;
    for (k, din) in dins.iter().enumerate() {
        if din.shape() != inputs[k].shape() {
            return fail(format!("input {k} grad shape {:?}", din.shape()));
        }
        let mut numeric = Vec::with_capacity(din.len());
        for i in 0..din.len() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + H;
            let up = loss(layer, &inputs, &r);
            inputs[k].data_mut()[i] = orig - H;
            let down = loss(layer, &inputs, &r);
            inputs[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let e = rel_err(din.data(), &numeric);
        if !(e <= TOL) {
            return fail(format!("input {k} rel err {e:e}"));
        }
        worst = worst.max(e);
    }

    for pi in 0..layer.params.len() {
        if !layer.params[pi].is_updatable() {
            if layer.params[pi].grads.data().iter().any(|&g| g != 0.0) {
                return fail(format!("non-updatable {} received a gradient", layer.params[pi].name));
            }
            continue;
        }
        let analytic = layer.params[pi].grads.data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = layer.params[pi].values.data()[i];
            layer.params[pi].values.data_mut()[i] = orig + H;
            let up = loss(layer, &inputs, &r);
            layer.params[pi].values.data_mut()[i] = orig - H;
            let down = loss(layer, &inputs, &r);
            layer.params[pi].values.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&analytic, &numeric);
        if !(e <= TOL) {
            return fail(format!("param {} rel err {e:e}", layer.params[pi].name));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

fn make(kind: LayerKind, in_shapes: &[Vec<usize>], rng: &mut Rng) -> Layer<f64> {
    let node = LayerNode::new("probe", kind, (0..in_shapes.len()).collect());
    let mut layer = Layer::new(&node, in_shapes, rng).unwrap();
    // Move every parameter off its trivial initial value.
    for p in &mut layer.params {
        let n = p.values.len();
        let vals: Vec<f64> = if p.name.contains("variance") {
            (0..n).map(|_| rng.uniform_range(0.5, 2.0)).collect()
        } else {
            (0..n).map(|_| rng.uniform_range(-0.8, 0.8)).collect()
        };
        p.values = Tensor::new(p.values.shape(), vals).unwrap();
    }
    layer
}

fn padding(rng: &mut Rng) -> Padding {
    if rng.below(2) == 0 {
        Padding::Same
    } else {
        Padding::Valid
    }
}

fn spatial(rng: &mut Rng, kernel: usize) -> (usize, usize, usize) {
    let h = kernel + rng.below(4);
    let w = kernel + rng.below(4);
    let n = 1 + rng.below(2);
    (n, h, w)
}

pub const CONFIGS: usize = 20;

fn run_configs(label: &str, mut build: impl FnMut(&mut Rng) -> (LayerKind, Vec<Vec<usize>>, usize, bool)) -> Outcome {
    let mut rng = Rng::new(label.bytes().map(u64::from).sum());
    let mut worst = 0.0f64;
    for cfg in 0..CONFIGS {
        let (kind, in_shapes, n, frozen) = build(&mut rng);
        let mut layer = make(kind.clone(), &in_shapes, &mut rng);
        layer.set_frozen(frozen);
        let inputs: Vec<Tensor<f64>> = in_shapes
            .iter()
            .map(|s| {
                let mut shape = vec![n];
                shape.extend_from_slice(s);
                random_tensor(&mut rng, &shape)
            })
            .collect();
        worst = worst.max(check(&mut layer, inputs, &mut rng, &format!("{label} #{cfg} {kind:?} {in_shapes:?}"))?);
    }
    Ok(worst)
}

pub fn conv2d() -> Outcome {
    run_configs("conv2d", |rng| {
        let kernel = 1 + rng.below(3);
        let (n, h, w) = spatial(rng, kernel);
        let cin = 1 + rng.below(3);
        let kind = LayerKind::Conv2D {
            kernel,
            stride: 1 + rng.below(2),
            padding: padding(rng),
            filters: 1 + rng.below(3),
            use_bias: rng.below(2) == 0,
        };
        (kind, vec![vec![h, w, cin]], n, false)
    })
}

pub fn depthwise_conv2d() -> Outcome {
    run_configs("depthwise", |rng| {
        let kernel = 1 + rng.below(3);
        let (n, h, w) = spatial(rng, kernel);
        let kind = LayerKind::DepthwiseConv2D {
            kernel,
            stride: 1 + rng.below(2),
            padding: padding(rng),
            use_bias: rng.below(2) == 0,
        };
        (kind, vec![vec![h, w, 1 + rng.below(3)]], n, false)
    })
}

pub fn separable_conv2d() -> Outcome {
    run_configs("separable", |rng| {
        let kernel = 1 + rng.below(3);
        let (n, h, w) = spatial(rng, kernel);
        let kind = LayerKind::SeparableConv2D {
            kernel,
            stride: 1 + rng.below(2),
            padding: padding(rng),
            filters: 1 + rng.below(3),
        };
        (kind, vec![vec![h, w, 1 + rng.below(3)]], n, false)
    })
}

pub fn batch_norm_training() -> Outcome {
    run_configs("bn_train", |rng| {
        let (_, h, w) = spatial(rng, 1);
        (LayerKind::batch_norm(), vec![vec![h, w, 1 + rng.below(3)]], 2 + rng.below(2), false)
    })
}

pub fn batch_norm_frozen() -> Outcome {
    run_configs("bn_frozen", |rng| {
        let (n, h, w) = spatial(rng, 1);
        (LayerKind::batch_norm(), vec![vec![h, w, 1 + rng.below(3)]], n, true)
    })
}

pub fn activations() -> Outcome {
    let mut worst = run_configs("relu", |rng| {
        let (n, h, w) = spatial(rng, 1);
        (LayerKind::Activation(ActivationKind::Relu), vec![vec![h, w, 2]], n, false)
    })?;
    // Inputs spread around both relu6 kinks.
    let mut rng = Rng::new(66);
    for cfg in 0..CONFIGS {
        let (n, h, w) = spatial(&mut rng, 1);
        let mut layer = make(LayerKind::Activation(ActivationKind::Relu6), &[vec![h, w, 2]], &mut rng);
        let x = random_tensor(&mut rng, &[n, h, w, 2]).map(|v| v * 5.0 + 3.0);
        worst = worst.max(check(&mut layer, vec![x], &mut rng, &format!("relu6 #{cfg}"))?);
    }
    Ok(worst)
}

pub fn max_pool() -> Outcome {
    run_configs("max_pool", |rng| {
        let pool = 2 + rng.below(2);
        let (n, h, w) = spatial(rng, pool);
        let kind = LayerKind::MaxPool {
            pool,
            stride: 1 + rng.below(2),
            padding: padding(rng),
        };
        (kind, vec![vec![h, w, 1 + rng.below(2)]], n, false)
    })
}

pub fn avg_pool() -> Outcome {
    run_configs("avg_pool", |rng| {
        let pool = 2 + rng.below(2);
        let (n, h, w) = spatial(rng, pool);
        let kind = LayerKind::AvgPool {
            pool,
            stride: 1 + rng.below(2),
            padding: padding(rng),
        };
        (kind, vec![vec![h, w, 1 + rng.below(2)]], n, false)
    })
}

pub fn zero_pad() -> Outcome {
    run_configs("zero_pad", |rng| {
        let (n, h, w) = spatial(rng, 1);
        let kind = LayerKind::ZeroPad {
            top: rng.below(2),
            bottom: rng.below(3),
            left: rng.below(2),
            right: rng.below(3),
        };
        (kind, vec![vec![h, w, 2]], n, false)
    })
}

pub fn global_avg_pool_and_flatten() -> Outcome {
    let gap = run_configs("gap", |rng| {
        let (n, h, w) = spatial(rng, 1);
        (LayerKind::GlobalAvgPool, vec![vec![h, w, 1 + rng.below(3)]], n, false)
    })?;
    run_configs("flatten", |rng| {
        let (n, h, w) = spatial(rng, 1);
        (LayerKind::Flatten, vec![vec![h, w, 1 + rng.below(3)]], n, false)
    })
    .map(|e| e.max(gap))
}

pub fn dense() -> Outcome {
    run_configs("dense", |rng| {
        let kind = LayerKind::Dense {
            units: 2 + rng.below(4),
            softmax: rng.below(2) == 0,
        };
        (kind, vec![vec![1 + rng.below(6)]], 1 + rng.below(3), false)
    })
}

pub fn softmax() -> Outcome {
    run_configs("softmax", |rng| {
        (LayerKind::Softmax, vec![vec![2 + rng.below(5)]], 1 + rng.below(3), false)
    })
}

pub fn concat_and_add() -> Outcome {
    let concat = run_configs("concat", |rng| {
        let (n, h, w) = spatial(rng, 1);
        let k = 2 + rng.below(2);
        let shapes = (0..k).map(|_| vec![h, w, 1 + rng.below(3)]).collect();
        (LayerKind::Concat, shapes, n, false)
    })?;
    run_configs("add", |rng| {
        let (n, h, w) = spatial(rng, 1);
        let k = 2 + rng.below(2);
        let c = 1 + rng.below(3);
        (LayerKind::Add, vec![vec![h, w, c]; k], n, false)
    })
    .map(|e| e.max(concat))
}

pub fn input_passthrough() -> Outcome {
    run_configs("input", |rng| {
        let (n, h, w) = spatial(rng, 1);
        (LayerKind::Input, vec![vec![h, w, 3]], n, false)
    })
}

/// Whole-graph check on a sample of parameters of each mini architecture.
/// Thousands of relu units sit downstream of every parameter, so a step of
/// 1e-5 occasionally crosses a kink; 1e-6 keeps the difference smooth.
pub fn mini_models_end_to_end() -> Outcome {
    const H: f64 = 1e-6;
    let mut worst = 0.0f64;
    for name in ["mini_mobilenet", "mini_densenet", "mini_xception"] {
        let desc = build_architecture(name, [32, 32, 3], 3, HeadKind::Gap).unwrap();
        let mut model = Model::<f64>::new(desc, 3).unwrap();
        let mut rng = Rng::new(17);
        let x = Tensor::from_fn(&[2, 32, 32, 3], |_| rng.uniform()).unwrap();
        let r = Tensor::from_fn(&[2, 3], |_| rng.uniform_range(-1.0, 1.0)).unwrap();
        let loss = |m: &mut Model<f64>| -> f64 {
            let p = m.forward(&x, Mode::Train).unwrap();
            m.clear_caches();
            p.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        model.zero_grads();
        model.forward(&x, Mode::Train).unwrap();
        model.backward(&r).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let targets: Vec<(usize, usize)> = model
            .params_mut()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_updatable())
            .map(|(i, p)| (i, p.values.len()))
            .collect();
        for _ in 0..40 {
            let (pi, len) = targets[rng.below(targets.len())];
            let ei = rng.below(len);
            analytic.push(model.params_mut()[pi].grads.data()[ei]);
            let orig = model.params_mut()[pi].values.data()[ei];
            model.params_mut()[pi].values.data_mut()[ei] = orig + H;
            let up = loss(&mut model);
            model.params_mut()[pi].values.data_mut()[ei] = orig - H;
            let down = loss(&mut model);
            model.params_mut()[pi].values.data_mut()[ei] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
        let e = rel_err(&analytic, &numeric);
        if !(e <= TOL) {
            return Err(format!("{name}: rel err {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn batch_norm_small_epsilon() -> Outcome {
    run_configs("bn_small_eps", |rng| {
        let (_, h, w) = spatial(rng, 1);
        let kind = LayerKind::BatchNorm {
            momentum: 0.99,
            epsilon: 1.001e-5,
        };
        (kind, vec![vec![h, w, 1 + rng.below(3)]], 2 + rng.below(2), false)
    })
}

/// Softmax followed by cross-entropy, differentiated with respect to the
/// logits in one step, against differences of an independent f64 loss.
pub fn fused_softmax_cross_entropy() -> Outcome {
    let mut rng = Rng::new(12);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let (n, k) = (1 + rng.below(6), 2 + rng.below(6));
        let z: Vec<f64> = (0..n * k).map(|_| rng.normal() * 2.0).collect();
        let mut y = vec![0.0; n * k];
        for row in 0..n {
            y[row * k + rng.below(k)] = 1.0;
        }
        let softmax = |z: &[f64]| -> Vec<f64> {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        };
        let loss_of = |z: &[f64]| -> f64 {
            let probs: Vec<f64> = z.chunks(k).flat_map(softmax).collect();
            -probs.iter().zip(&y).map(|(p, t)| t * p.ln()).sum::<f64>() / n as f64
        };
        let probs: Vec<f64> = z.chunks(k).flat_map(softmax).collect();
        let ce = cross_entropy(
            &Tensor::<f64>::new(&[n, k], probs).unwrap(),
            &Tensor::<f64>::new(&[n, k], y.clone()).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        if (ce.loss - loss_of(&z)).abs() > 1e-12 {
            return Err(format!("trial {trial}: loss {} vs {}", ce.loss, loss_of(&z)));
        }
        let numeric: Vec<f64> = (0..n * k)
            .map(|i| {
                let mut up = z.clone();
                up[i] += H;
                let mut down = z.clone();
                down[i] -= H;
                (loss_of(&up) - loss_of(&down)) / (2.0 * H)
            })
            .collect();
        let e = rel_err(ce.grad.data(), &numeric);
        if !(e <= CE_TOL) {
            return Err(format!("trial {trial} ({n}x{k}): rel err {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Every layer-kind suite, by name.
pub const LAYER_SUITES: [(&str, fn() -> Outcome); 15] = [
    ("conv2d", conv2d),
    ("depthwise_conv2d", depthwise_conv2d),
    ("separable_conv2d", separable_conv2d),
    ("batch_norm (train)", batch_norm_training),
    ("batch_norm (frozen)", batch_norm_frozen),
    ("batch_norm (eps 1.001e-5)", batch_norm_small_epsilon),
    ("relu, relu6", activations),
    ("max_pool", max_pool),
    ("avg_pool", avg_pool),
    ("zero_pad", zero_pad),
    ("global_avg_pool, flatten", global_avg_pool_and_flatten),
    ("dense", dense),
    ("softmax", softmax),
    ("concat, add", concat_and_add),
    ("input", input_passthrough),
];
