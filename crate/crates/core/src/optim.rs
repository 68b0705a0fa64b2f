//! First-order optimizers over a parameter list.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::Parameter;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("unknown optimizer `{0}` (expected one of: sgd, rmsprop, adagrad, adadelta, adam, nadam, adamax)")]
    UnknownKind(String),
    #[error("invalid hyperparameter {name} = {value}: {rule}")]
    Hyperparameter {
        name: &'static str,
        value: f64,
        rule: &'static str,
    },
    #[error("optimizer state tracks {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("parameter {index} (`{name}`) has shape {actual:?}, state slot has {expected:?}")]
    ParamShape {
        index: usize,
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

pub type Result<T, E = OptimError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adagrad,
    Adadelta,
    Adam,
    Nadam,
    Adamax,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Rmsprop,
        OptimizerKind::Adagrad,
        OptimizerKind::Adadelta,
        OptimizerKind::Adam,
        OptimizerKind::Nadam,
        OptimizerKind::Adamax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Nadam => "nadam",
            OptimizerKind::Adamax => "adamax",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.01,
            OptimizerKind::Adadelta => 1.0,
            _ => 0.001,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == lower)
            .ok_or_else(|| OptimError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Decay for rmsprop (0.9) and adadelta (0.95).
    pub rho: f64,
    /// sgd only.
    pub momentum: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerConfig {
            kind,
            learning_rate: kind.default_learning_rate(),
            beta1: 0.9,
            beta2: 0.999,
            rho: if kind == OptimizerKind::Adadelta { 0.95 } else { 0.9 },
            momentum: 0.0,
            epsilon: 1e-7,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, value, rule| OptimError::Hyperparameter { name, value, rule };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", self.learning_rate, "must be > 0"));
        }
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("rho", self.rho),
            ("momentum", self.momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(name, v, "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(bad("epsilon", self.epsilon, "must be > 0"));
        }
        Ok(())
    }

    /// Auxiliary tensors kept per parameter.
    pub fn slots_per_param(&self) -> usize {
        match self.kind {
            OptimizerKind::Sgd => usize::from(self.momentum > 0.0),
            OptimizerKind::Rmsprop | OptimizerKind::Adagrad => 1,
            OptimizerKind::Adadelta | OptimizerKind::Adam | OptimizerKind::Nadam | OptimizerKind::Adamax => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: OptimizerConfig,
    pub step: u64,
    /// `slots[i]` belongs to parameter `i`.
    pub slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a, I>(config: OptimizerConfig, params: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Parameter<T>>,
    {
        config.validate()?;
        let per = config.slots_per_param();
        let slots = params
            .into_iter()
            .map(|p| {
                (0..per)
                    .map(|_| Tensor::zeros(p.values.shape()).expect("parameter shape is valid"))
                    .collect()
            })
            .collect();
        Ok(OptimizerState { config, step: 0, slots })
    }

    pub fn slot_count(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    /// Applies one update to every updatable parameter and zeroes all
    /// gradients. Frozen and moving-statistic parameters are not touched.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(OptimError::ParamCount {
                expected: self.slots.len(),
                actual: params.len(),
            });
        }
        for (i, (p, slots)) in params.iter().zip(&self.slots).enumerate() {
            if let Some(s) = slots.first() {
                if s.shape() != p.values.shape() {
                    return Err(OptimError::ParamShape {
                        index: i,
                        name: p.name.clone(),
                        expected: s.shape().to_vec(),
                        actual: p.values.shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let rule = Rule::new(&self.config, self.step);
        for (p, slots) in params.iter_mut().zip(&mut self.slots) {
            if p.is_updatable() {
                let (w, g) = (p.values.data_mut(), p.grads.data());
                match slots.as_mut_slice() {
                    [] => {
                        for (w, &g) in w.iter_mut().zip(g) {
                            rule.apply(w, g, &mut T::zero(), &mut T::zero());
                        }
                    }
                    [a] => {
                        for ((w, &g), a) in w.iter_mut().zip(g).zip(a.data_mut()) {
                            rule.apply(w, g, a, &mut T::zero());
                        }
                    }
                    [a, b, ..] => {
                        for (((w, &g), a), b) in w.iter_mut().zip(g).zip(a.data_mut()).zip(b.data_mut()) {
                            rule.apply(w, g, a, b);
                        }
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Per-step constants, converted once.
struct Rule<T> {
    kind: OptimizerKind,
    lr: T,
    b1: T,
    b2: T,
    rho: T,
    mu: T,
    eps: T,
    /// 1 − β1ᵗ and 1 − β2ᵗ.
    c1: T,
    c2: T,
    one: T,
}

impl<T: Scalar> Rule<T> {
    fn new(c: &OptimizerConfig, t: u64) -> Self {
        let t = t.min(i32::MAX as u64) as i32;
        Rule {
            kind: c.kind,
            lr: T::from_f64(c.learning_rate),
            b1: T::from_f64(c.beta1),
            b2: T::from_f64(c.beta2),
            rho: T::from_f64(c.rho),
            mu: T::from_f64(c.momentum),
            eps: T::from_f64(c.epsilon),
            c1: T::from_f64(1.0 - c.beta1.powi(t)),
            c2: T::from_f64(1.0 - c.beta2.powi(t)),
            one: T::one(),
        }
    }

    #[inline]
    fn apply(&self, w: &mut T, g: T, a: &mut T, b: &mut T) {
        let one = self.one;
        match self.kind {
            OptimizerKind::Sgd => {
                if self.mu > T::zero() {
                    *a = self.mu * *a + g;
                    *w = *w - self.lr * *a;
                } else {
                    *w = *w - self.lr * g;
                }
            }
            OptimizerKind::Rmsprop => {
                *a = self.rho * *a + (one - self.rho) * g * g;
                *w = *w - self.lr * g / (a.sqrt() + self.eps);
            }
            OptimizerKind::Adagrad => {
                *a = *a + g * g;
                *w = *w - self.lr * g / (a.sqrt() + self.eps);
            }
            OptimizerKind::Adadelta => {
                *a = self.rho * *a + (one - self.rho) * g * g;
                let delta = -((*b + self.eps).sqrt() / (*a + self.eps).sqrt()) * g;
                *b = self.rho * *b + (one - self.rho) * delta * delta;
                *w = *w + self.lr * delta;
            }
            OptimizerKind::Adam => {
                *a = self.b1 * *a + (one - self.b1) * g;
                *b = self.b2 * *b + (one - self.b2) * g * g;
                let m_hat = *a / self.c1;
                let v_hat = *b / self.c2;
                *w = *w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            OptimizerKind::Nadam => {
                *a = self.b1 * *a + (one - self.b1) * g;
                *b = self.b2 * *b + (one - self.b2) * g * g;
                let m_hat = *a / self.c1;
                let v_hat = *b / self.c2;
                let m_bar = self.b1 * m_hat + (one - self.b1) * g / self.c1;
                *w = *w - self.lr * m_bar / (v_hat.sqrt() + self.eps);
            }
            OptimizerKind::Adamax => {
                *a = self.b1 * *a + (one - self.b1) * g;
                *b = (self.b2 * *b).max(g.abs());
                *w = *w - self.lr * (*a / self.c1) / (*b + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(w: f64, g: f64) -> Parameter<f64> {
        let mut p = Parameter::new("w", Tensor::from_f64_slice(&[1], &[w]).unwrap(), false);
        p.grads = Tensor::from_f64_slice(&[1], &[g]).unwrap();
        p
    }

    fn run(config: OptimizerConfig, w: f64, grads: &[f64]) -> Vec<f64> {
        let mut p = param(w, 0.0);
        let mut state = OptimizerState::new(config, [&p]).unwrap();
        let mut out = Vec::new();
        for &g in grads {
            p.grads.data_mut()[0] = g;
            state.step(&mut [&mut p]).unwrap();
            out.push(p.values.data()[0]);
        }
        out
    }

    #[test]
    fn sgd_single_step() {
        let c = OptimizerConfig::new(OptimizerKind::Sgd).with_learning_rate(0.1);
        assert_eq!(run(c, 1.0, &[0.5]), vec![0.95]);
    }

    #[test]
    fn adam_first_step() {
        let w = run(OptimizerConfig::new(OptimizerKind::Adam), 1.0, &[0.5])[0];
        assert!((w - 0.999).abs() <= 1e-9, "{w}");
    }

    #[test]
    fn adagrad_two_steps() {
        let mut c = OptimizerConfig::new(OptimizerKind::Adagrad).with_learning_rate(1.0);
        c.epsilon = 1e-10;
        let w = run(c, 0.0, &[2.0, 2.0]);
        assert!((w[0] + 1.0).abs() < 1e-9);
        assert!((w[1] + 1.0 + 2.0 / 8f64.sqrt()).abs() < 1e-9);
        assert!((w[1] + 1.7071).abs() < 1e-4);
    }

    #[test]
    fn slot_counts() {
        let ps = [param(0.0, 0.0), param(0.0, 0.0), param(0.0, 0.0)];
        let count = |c: OptimizerConfig| OptimizerState::new(c, ps.iter()).unwrap().slot_count();
        assert_eq!(count(OptimizerConfig::new(OptimizerKind::Adam)), 6);
        assert_eq!(count(OptimizerConfig::new(OptimizerKind::Sgd)), 0);
        let mut m = OptimizerConfig::new(OptimizerKind::Sgd);
        m.momentum = 0.9;
        assert_eq!(count(m), 3);
        assert_eq!(count(OptimizerConfig::new(OptimizerKind::Adadelta)), 6);
        let s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adamax), ps.iter()).unwrap();
        assert!(s.slots.iter().flatten().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn frozen_and_moving_untouched_and_grads_zeroed() {
        let mut frozen = param(1.0, 3.0);
        frozen.trainable = false;
        let mut moving = Parameter::new("mm", Tensor::from_f64_slice(&[1], &[2.0]).unwrap(), true);
        moving.grads.data_mut()[0] = 1.0;
        let mut live = param(1.0, 1.0);
        let mut s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adam), [&frozen, &moving, &live]).unwrap();
        s.step(&mut [&mut frozen, &mut moving, &mut live]).unwrap();
        assert_eq!(frozen.values.data()[0].to_bits(), 1f64.to_bits());
        assert_eq!(moving.values.data()[0].to_bits(), 2f64.to_bits());
        assert!(live.values.data()[0] < 1.0);
        for p in [&frozen, &moving, &live] {
            assert_eq!(p.grads.data()[0], 0.0);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn mismatches_are_errors() {
        let p = param(0.0, 0.0);
        let mut s = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Adam), [&p]).unwrap();
        let mut a = param(0.0, 0.0);
        let mut b = param(0.0, 0.0);
        assert!(matches!(s.step(&mut [&mut a, &mut b]), Err(OptimError::ParamCount { .. })));
        let mut wide = Parameter::new("w", Tensor::<f64>::zeros(&[2]).unwrap(), false);
        assert!(matches!(s.step(&mut [&mut wide]), Err(OptimError::ParamShape { .. })));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn validation_and_names() {
        let mut c = OptimizerConfig::new(OptimizerKind::Rmsprop);
        c.rho = 1.0;
        assert!(c.validate().is_err());
        let c = OptimizerConfig::new(OptimizerKind::Sgd).with_learning_rate(0.0);
        assert!(c.validate().is_err());
        for k in OptimizerKind::ALL {
            assert_eq!(k.as_str().parse::<OptimizerKind>().unwrap(), k);
        }
        assert!("lbfgs".parse::<OptimizerKind>().is_err());
        assert_eq!(OptimizerConfig::new(OptimizerKind::Adadelta).learning_rate, 1.0);
    }
}
