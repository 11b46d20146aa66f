//! Optimizers and the cyclic cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cosine annealing restarted every `cycle_len_epochs`, each cycle's peak decayed by
/// `cycle_decay`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub cycle_len_epochs: usize,
    pub cycle_decay: f64,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("lr", "base learning rate must be positive"));
        }
        if !(self.cycle_decay > 0.0 && self.cycle_decay <= 1.0) {
            return Err(Error::config("cycle_decay", "must lie in (0, 1]"));
        }
        if self.cycle_len_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("cycle_len_epochs", "cycle length must be positive"));
        }
        Ok(())
    }

    pub fn cycle_steps(&self) -> usize {
        self.cycle_len_epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let len = self.cycle_steps().max(1);
        let cycle = step / len;
        let t = (step % len) as f64;
        self.base_lr * self.cycle_decay.powi(cycle as i32) * 0.5 * (1.0 + (PI * t / len as f64).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            momentum: 0.9,
            weight_decay: 0.0004,
            rms_decay: 0.9,
            rms_eps: 1e-8,
        }
    }
}

/// One Nesterov momentum step in place. `weight_decay` is folded into the gradient.
pub fn sgd_nesterov_step<T: Scalar>(value: &mut [T], grad: &[T], buf: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((w, &g), b) in value.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let g = g + wd * *w;
        *b = mu * *b + g;
        *w -= lr * (g + mu * *b);
    }
}

/// One RMSProp step in place: `v = rho*v + (1-rho)*g^2; w -= lr * g / (sqrt(v) + eps)`.
pub fn rmsprop_step<T: Scalar>(value: &mut [T], grad: &[T], sq: &mut [T], lr: f64, rho: f64, eps: f64, weight_decay: f64) {
    let (lr, rho, eps, wd) = (T::of(lr), T::of(rho), T::of(eps), T::of(weight_decay));
    for ((w, &g), v) in value.iter_mut().zip(grad).zip(sq.iter_mut()) {
        let g = g + wd * *w;
        *v = rho * *v + (T::one() - rho) * g * g;
        *w -= lr * g / (v.sqrt() + eps);
    }
}

/// Optimizer with per-parameter buffers keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates one parameter from its gradient. Frozen parameters are skipped.
    pub fn step(&mut self, param: &mut Parameter<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if !param.trainable {
            return Ok(());
        }
        if grad.shape() != param.value.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("{}: grad {:?} vs value {:?}", param.name, grad.shape(), param.value.shape()),
            ));
        }
        let wd = if param.decay_exempt { 0.0 } else { self.config.weight_decay };
        let buf = self
            .buffers
            .entry(param.name.clone())
            .or_insert_with(|| Tensor::zeros(param.value.shape().to_vec()));
        match self.config.kind {
            OptimizerKind::SgdNesterov => sgd_nesterov_step(
                param.value.data_mut(),
                grad.data(),
                buf.data_mut(),
                lr,
                self.config.momentum,
                wd,
            ),
            OptimizerKind::Rmsprop => rmsprop_step(
                param.value.data_mut(),
                grad.data(),
                buf.data_mut(),
                lr,
                self.config.rms_decay,
                self.config.rms_eps,
                wd,
            ),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            base_lr: 0.008,
            cycle_len_epochs: 5,
            cycle_decay: 0.9,
            steps_per_epoch: 10,
        }
    }

    #[test]
    fn lr_schedule_points() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.008);
        assert!((s.lr_at(25) - 0.004).abs() < 1e-15);
        assert!((s.lr_at(100) - 0.008 * 0.81).abs() < 1e-15);
        assert!((s.lr_at(100) - 0.00648).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_validation() {
        let mut s = sched();
        s.cycle_decay = 1.5;
        assert!(s.validate().is_err());
        s.cycle_decay = 0.9;
        s.base_lr = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_grad_zero_momentum_is_noop() {
        let mut w = vec![1.0f64, -2.0];
        let mut b = vec![0.0; 2];
        sgd_nesterov_step(&mut w, &[0.0, 0.0], &mut b, 0.1, 0.9, 0.0);
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn nesterov_by_hand() {
        // g' = 2 + 0.1*1 = 2.1; b = 0.9*0.5 + 2.1 = 2.55; w = 1 - 0.1*(2.1 + 0.9*2.55) = 0.5605
        let mut w = vec![1.0f64];
        let mut b = vec![0.5];
        sgd_nesterov_step(&mut w, &[2.0], &mut b, 0.1, 0.9, 0.1);
        assert!((b[0] - 2.55).abs() < 1e-12);
        assert!((w[0] - 0.5605).abs() < 1e-12);
    }

    #[test]
    fn rmsprop_step_tends_to_lr_times_sign() {
        let mut w = vec![0.0f64, 0.0];
        let mut v = vec![0.0; 2];
        let mut last = vec![0.0; 2];
        for _ in 0..400 {
            let before = w.clone();
            rmsprop_step(&mut w, &[3.0, -0.2], &mut v, 0.01, 0.9, 1e-8, 0.0);
            last = w.iter().zip(&before).map(|(a, b)| a - b).collect();
        }
        assert!((last[0] + 0.01).abs() < 1e-8, "{last:?}");
        assert!((last[1] - 0.01).abs() < 1e-8, "{last:?}");
    }

    #[test]
    fn decay_exempt_parameters_skip_weight_decay() {
        let mut opt = OptimizerState::<f64>::new(OptimizerConfig {
            weight_decay: 0.5,
            ..Default::default()
        });
        let mut a = Parameter::new("a", Tensor::full([1], 1.0));
        let mut b = Parameter::new("b", Tensor::full([1], 1.0)).exempt();
        let zero = Tensor::zeros([1]);
        opt.step(&mut a, &zero, 0.1).unwrap();
        opt.step(&mut b, &zero, 0.1).unwrap();
        assert!(a.value.item() < 1.0);
        assert_eq!(b.value.item(), 1.0);
    }
}
