//! SGD with momentum, Adam, and the step-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer choice plus its hyperparameters. The learning rate itself
/// comes from [`LrSchedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f32,
        #[serde(default)]
        weight_decay: f32,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_adam_eps")]
        epsilon: f32,
        #[serde(default)]
        weight_decay: f32,
    },
}

fn default_momentum() -> f32 {
    0.9
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}

impl OptimizerSpec {
    pub fn sgd(momentum: f32, weight_decay: f32) -> Self {
        OptimizerSpec::Sgd {
            momentum,
            weight_decay,
        }
    }

    pub fn adam() -> Self {
        OptimizerSpec::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::Sgd { .. } => "SGD",
            OptimizerSpec::Adam { .. } => "Adam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::Sgd {
                momentum,
                weight_decay,
            } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerSpec::Adam {
                beta1,
                beta2,
                epsilon,
                weight_decay,
            } => {
                (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && epsilon > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
enum Moments {
    Sgd { velocity: Vec<f32> },
    Adam { first: Vec<f32>, second: Vec<f32> },
}

/// Per-parameter optimizer state, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptimState {
    spec: OptimizerSpec,
    lr: f32,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(spec: OptimizerSpec, lr: f32) -> Result<Self> {
        spec.validate()?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
        }
        Ok(OptimState {
            spec,
            lr,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that requires a gradient.
    /// A trainable parameter without a gradient is a usage error.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect();
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::Usage(format!("parameter `{name}` has no gradient")));
        }
        self.step += 1;
        let lr = self.lr;
        let t = self.step as i32;
        for (name, tensor) in params {
            let numel = tensor.numel();
            let entry = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| match self.spec {
                    OptimizerSpec::Sgd { .. } => Moments::Sgd {
                        velocity: vec![0.0; numel],
                    },
                    OptimizerSpec::Adam { .. } => Moments::Adam {
                        first: vec![0.0; numel],
                        second: vec![0.0; numel],
                    },
                });
            let (w, g) = tensor.data_and_grad_mut();
            let g = g.expect("checked above");
            match (&self.spec, entry) {
                (
                    &OptimizerSpec::Sgd {
                        momentum,
                        weight_decay,
                    },
                    Moments::Sgd { velocity },
                ) => {
                    if velocity.len() != numel {
                        return Err(Error::Dimension(format!(
                            "momentum buffer for `{name}` does not match its parameter"
                        )));
                    }
                    for ((wi, &gi), vi) in w.iter_mut().zip(g.iter()).zip(velocity.iter_mut()) {
                        let d = gi + weight_decay * *wi;
                        *vi = momentum * *vi + d;
                        *wi -= lr * *vi;
                    }
                }
                (
                    &OptimizerSpec::Adam {
                        beta1,
                        beta2,
                        epsilon,
                        weight_decay,
                    },
                    Moments::Adam { first, second },
                ) => {
                    if first.len() != numel || second.len() != numel {
                        return Err(Error::Dimension(format!(
                            "moment buffers for `{name}` do not match their parameter"
                        )));
                    }
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((wi, &gi), mi), vi) in w
                        .iter_mut()
                        .zip(g.iter())
                        .zip(first.iter_mut())
                        .zip(second.iter_mut())
                    {
                        let d = gi + weight_decay * *wi;
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *wi -= lr * mhat / (vhat.sqrt() + epsilon);
                    }
                }
                _ => unreachable!("moment kind always follows the optimizer kind"),
            }
        }
        Ok(())
    }
}

/// Step decay: `base_lr * decay_factor^floor(epoch / step_every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub decay_factor: f32,
    pub step_every: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be >= 0", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!(
                "decay_factor {} must lie in (0, 1)",
                self.decay_factor
            )));
        }
        if self.step_every == 0 {
            return Err(Error::Config("step_every must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        let steps = (epoch / self.step_every) as i32;
        self.base_lr * self.decay_factor.powi(steps)
    }

    /// Same decay pattern with the base rate scaled, e.g. for fine-tuning.
    pub fn scaled(&self, factor: f32) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr * factor,
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn param(values: &[f32], grad: &[f32]) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values.to_vec())
            .unwrap()
            .with_requires_grad(true);
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn plain_sgd_step() {
        let mut w = param(&[1.0], &[1.0]);
        let mut opt = OptimState::new(OptimizerSpec::sgd(0.0, 0.0), 0.1).unwrap();
        opt.step([("w", &mut w)]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-7);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_sgd_parameters_alone() {
        let mut w = param(&[0.5, -2.0, 3.0], &[0.0, 0.0, 0.0]);
        let before = w.clone();
        let mut opt = OptimState::new(OptimizerSpec::sgd(0.9, 0.0), 0.1).unwrap();
        for _ in 0..5 {
            opt.step([("w", &mut w)]).unwrap();
        }
        assert!(w.bit_eq(&before));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3f32, 0.5, -3.0, 250.0] {
            let mut w = param(&[2.0], &[g]);
            let lr = 0.01;
            let mut opt = OptimState::new(OptimizerSpec::adam(), lr).unwrap();
            opt.step([("w", &mut w)]).unwrap();
            // Closed form: |dw| = lr * |g| / (|g| + eps).
            let expected = lr as f64 * g.abs() as f64 / (g.abs() as f64 + 1e-8);
            let moved = (2.0 - w.data()[0] as f64).abs();
            assert!((moved - expected).abs() / expected < 1e-2, "g={g}: {moved} vs {expected}");
            assert!((moved - lr as f64).abs() / (lr as f64) < 1e-2);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut w = param(&[0.0], &[1.0]);
        let mut opt = OptimState::new(OptimizerSpec::sgd(0.5, 0.0), 1.0).unwrap();
        opt.step([("w", &mut w)]).unwrap();
        opt.step([("w", &mut w)]).unwrap();
        // v1 = 1, v2 = 0.5 + 1 = 1.5
        assert_eq!(w.data()[0], -2.5);
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut w = Tensor::zeros(&[2]).with_requires_grad(true);
        let mut opt = OptimState::new(OptimizerSpec::adam(), 0.1).unwrap();
        assert!(matches!(opt.step([("w", &mut w)]), Err(Error::Usage(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut w = Tensor::ones(&[2]);
        let mut opt = OptimState::new(OptimizerSpec::sgd(0.9, 0.1), 0.1).unwrap();
        opt.step([("w", &mut w)]).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn step_decay_values() {
        let s = LrSchedule {
            base_lr: 0.1,
            decay_factor: 0.1,
            step_every: 30,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(30) - 0.01).abs() < 1e-9);
        // 0.1 * 0.1^floor(65/30) = 0.1 * 0.01
        assert!((s.lr_at(65) - 0.001).abs() < 1e-9);
        assert!((s.lr_at(29) - 0.1).abs() < 1e-9);
    }

    #[test]
    fn schedule_validation() {
        let bad = LrSchedule {
            base_lr: 0.1,
            decay_factor: 1.5,
            step_every: 10,
        };
        assert!(bad.validate().is_err());
        let bad = LrSchedule {
            base_lr: 0.1,
            decay_factor: 0.5,
            step_every: 0,
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn lr_is_non_increasing(
            base in 1e-5f32..1.0,
            factor in 0.01f32..0.99,
            every in 1usize..50,
            epoch in 0usize..500,
        ) {
            let s = LrSchedule { base_lr: base, decay_factor: factor, step_every: every };
            prop_assert!(s.lr_at(epoch + 1) <= s.lr_at(epoch));
            prop_assert!(s.lr_at(epoch) >= 0.0);
        }
    }
}
