//! Optimizer update rules against a scalar reference, and convergence.

use flora_core::layers::Parameter;
use flora_core::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use flora_core::{Rng, Tensor};

pub const STEP_TOL: f64 = 1e-10;
pub const TRIALS: usize = 100;
pub const QUADRATIC_TOL: f64 = 1e-3;
pub const QUADRATIC_STEPS: usize = 2000;

/// Straight-from-the-formula scalar reference. `a`, `b` are the two slots,
/// `t` the step index after incrementing.
pub fn oracle(c: &OptimizerConfig, w: f64, g: f64, a: f64, b: f64, t: u64) -> (f64, f64, f64) {
    let (lr, eps) = (c.learning_rate, c.epsilon);
    let (b1, b2) = (c.beta1, c.beta2);
    let t = t as i32;
    match c.kind {
        OptimizerKind::Sgd if c.momentum > 0.0 => {
            let m = c.momentum * a + g;
            (w - lr * m, m, b)
        }
        OptimizerKind::Sgd => (w - lr * g, a, b),
        OptimizerKind::Rmsprop => {
            let v = c.rho * a + (1.0 - c.rho) * g * g;
            (w - lr * g / (v.sqrt() + eps), v, b)
        }
        OptimizerKind::Adagrad => {
            let acc = a + g * g;
            (w - lr * g / (acc.sqrt() + eps), acc, b)
        }
        OptimizerKind::Adadelta => {
            let acc = c.rho * a + (1.0 - c.rho) * g * g;
            let delta = -((b + eps).sqrt() / (acc + eps).sqrt()) * g;
            let d = c.rho * b + (1.0 - c.rho) * delta * delta;
            (w + lr * delta, acc, d)
        }
        OptimizerKind::Adam => {
            let m = b1 * a + (1.0 - b1) * g;
            let v = b2 * b + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            (w - lr * mh / (vh.sqrt() + eps), m, v)
        }
        OptimizerKind::Nadam => {
            let m = b1 * a + (1.0 - b1) * g;
            let v = b2 * b + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            let look = b1 * mh + (1.0 - b1) * g / (1.0 - b1.powi(t));
            (w - lr * look / (vh.sqrt() + eps), m, v)
        }
        OptimizerKind::Adamax => {
            let m = b1 * a + (1.0 - b1) * g;
            let u = (b2 * b).max(g.abs());
            (w - lr * (m / (1.0 - b1.powi(t))) / (u + eps), m, u)
        }
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

pub fn configs() -> Vec<OptimizerConfig> {
    let mut out: Vec<_> = OptimizerKind::ALL.into_iter().map(OptimizerConfig::new).collect();
    let mut momentum = OptimizerConfig::new(OptimizerKind::Sgd);
    momentum.momentum = 0.9;
    out.push(momentum);
    out
}

/// Runs `TRIALS` random single steps for one configuration; returns the
/// worst relative deviation from the reference.
pub fn single_steps(c: OptimizerConfig, rng: &mut Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    for trial in 0..TRIALS {
        let w = rng.uniform_range(-2.0, 2.0);
        let g = rng.uniform_range(-3.0, 3.0);
        // Slots hold only reachable values: second moments are non-negative.
        let a = match c.kind {
            OptimizerKind::Rmsprop | OptimizerKind::Adagrad | OptimizerKind::Adadelta => rng.uniform_range(0.0, 4.0),
            _ => rng.uniform_range(-1.0, 1.0),
        };
        let b = rng.uniform_range(0.0, 4.0);
        let t = rng.below(50) as u64;

        let mut p = Parameter::new("w", Tensor::from_f64_slice(&[1], &[w]).unwrap(), false);
        p.grads = Tensor::from_f64_slice(&[1], &[g]).unwrap();
        let mut state = OptimizerState::<f64>::new(c, [&p]).map_err(|e| e.to_string())?;
        state.step = t;
        for (slot, v) in state.slots[0].iter_mut().zip([a, b]) {
            slot.data_mut()[0] = v;
        }
        state.step(&mut [&mut p]).map_err(|e| e.to_string())?;
        if state.step != t + 1 {
            return Err(format!("{} trial {trial}: step counter {}", c.kind, state.step));
        }
        let (ew, ea, eb) = oracle(&c, w, g, a, b, t + 1);
        let mut errs = vec![rel(p.values.data()[0], ew)];
        errs.extend(state.slots[0].iter().zip([ea, eb]).map(|(s, e)| rel(s.data()[0], e)));
        for e in errs {
            if !(e <= STEP_TOL) {
                return Err(format!("{} trial {trial}: rel err {e:e}", c.kind));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

/// Minimizes a 10-dimensional quadratic from a nearby start; returns the
/// first step at which every coordinate is within `QUADRATIC_TOL`.
pub fn quadratic(kind: OptimizerKind) -> Result<usize, String> {
    let mut rng = Rng::new(11);
    let target: Vec<f64> = (0..10).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let start: Vec<f64> = target.iter().map(|t| t + rng.uniform_range(-0.03, 0.03)).collect();
    let mut p = Parameter::new("w", Tensor::from_f64_slice(&[10], &start).unwrap(), false);
    let mut state = OptimizerState::<f64>::new(OptimizerConfig::new(kind), [&p]).map_err(|e| e.to_string())?;
    let dist = |p: &Parameter<f64>| p.values.data().iter().zip(&target).map(|(w, t)| (w - t).abs()).fold(0.0, f64::max);
    let mut reached = None;
    for step in 1..=QUADRATIC_STEPS {
        let g: Vec<f64> = p.values.data().iter().zip(&target).map(|(w, t)| 2.0 * (w - t)).collect();
        p.grads = Tensor::from_f64_slice(&[10], &g).unwrap();
        state.step(&mut [&mut p]).map_err(|e| e.to_string())?;
        if dist(&p) <= QUADRATIC_TOL && reached.is_none() {
            reached = Some(step);
        }
    }
    let last = dist(&p);
    match reached {
        Some(step) if last <= QUADRATIC_TOL => Ok(step),
        _ => Err(format!("{kind}: distance {last:e} after {QUADRATIC_STEPS} steps")),
    }
}
