//! SGD with Nesterov momentum, L2 weight decay folded into the gradient,
//! and a warmup + multi-step decay learning-rate schedule.

use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.005, momentum: 0.9, weight_decay: 0.0005, nesterov: true }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("sgd: lr {} must be nonnegative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("sgd: momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::arg(format!(
                "sgd: weight_decay {} must be nonnegative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers plus the trainability mask. Velocity
/// buffers always match their parameter's shape.
pub struct SgdState<T> {
    cfg: SgdConfig,
    velocity: Vec<Tensor<T>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ParamSet<T>, cfg: SgdConfig, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        cfg.validate()?;
        let mut velocity = Vec::with_capacity(params.len());
        let mut mask = Vec::with_capacity(params.len());
        for (_, name, p) in params.iter() {
            velocity.push(Tensor::zeros(p.value.shape().to_vec()));
            mask.push(trainable(name));
        }
        Ok(SgdState { cfg, velocity, trainable: mask })
    }

    pub fn config(&self) -> SgdConfig {
        self.cfg
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    /// One update at learning rate `lr`:
    ///
    /// ```text
    /// g = grad + weight_decay * param
    /// v = momentum * v + g
    /// param -= lr * (nesterov ? g + momentum * v : v)
    /// ```
    ///
    /// Gradients of updated parameters are zeroed afterwards. Frozen
    /// parameters are untouched, gradients included.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::arg(format!(
                "sgd: optimizer built for {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = T::from_f64(lr);
        let mu = T::from_f64(self.cfg.momentum);
        let wd = T::from_f64(self.cfg.weight_decay);
        for (i, (_, _, p)) in params.iter_mut().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let vel = self.velocity[i].data_mut();
            let grad = p.grad.data_mut();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j] + wd * value[j];
                let v = mu * vel[j] + g;
                vel[j] = v;
                let d = if self.cfg.nesterov { g + mu * v } else { v };
                value[j] = value[j] - lr * d;
                grad[j] = T::zero();
            }
        }
        Ok(())
    }
}

/// Warmup then multi-step decay, all fractions of the total epoch count.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        LrSchedule { base_lr, warmup_frac: 0.0, milestones: Vec::new(), decay: 1.0 }
    }

    /// Learning rate for `epoch` out of `total` epochs: linear ramp over the
    /// warmup epochs, then `base_lr * decay^k` after the k-th milestone.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        let warmup = (self.warmup_frac * total as f64).floor() as usize;
        if epoch < warmup {
            return self.base_lr * (epoch + 1) as f64 / (warmup + 1) as f64;
        }
        let mut lr = self.base_lr;
        for &m in &self.milestones {
            if epoch >= (m * total as f64).floor() as usize {
                lr *= self.decay;
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn vanilla_step() {
        // momentum 0, wd 0, lr 0.1, param 1.0, grad 2.0 -> 0.8
        let mut params = one_param(1.0);
        params.get_mut(crate::tensor::ParamRef(0)).grad.data_mut()[0] = 2.0;
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0, nesterov: false };
        let mut opt = SgdState::new(&params, cfg, |_| true).unwrap();
        opt.step(&mut params, 0.1).unwrap();
        let v = params.get(crate::tensor::ParamRef(0)).value.data()[0];
        assert!((v - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut params = one_param(1.5);
        params.get_mut(crate::tensor::ParamRef(0)).grad.data_mut()[0] = 3.0;
        let cfg = SgdConfig { lr: 0.0, momentum: 0.9, weight_decay: 0.0, nesterov: true };
        let mut opt = SgdState::new(&params, cfg, |_| true).unwrap();
        opt.step(&mut params, 0.0).unwrap();
        assert_eq!(params.get(crate::tensor::ParamRef(0)).value.data()[0], 1.5);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // Two steps, constant grad 1, momentum 0.9, lr 0.1, start 0:
        // step1 -> -0.1, step2 -> -0.29 (velocity 1.9).
        let mut params = one_param(0.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0, nesterov: false };
        let mut opt = SgdState::new(&params, cfg, |_| true).unwrap();
        let r = crate::tensor::ParamRef(0);
        params.get_mut(r).grad.data_mut()[0] = 1.0;
        opt.step(&mut params, 0.1).unwrap();
        assert!((params.get(r).value.data()[0] + 0.1).abs() < 1e-12);
        params.get_mut(r).grad.data_mut()[0] = 1.0;
        opt.step(&mut params, 0.1).unwrap();
        assert!((params.get(r).value.data()[0] + 0.29).abs() < 1e-12);
        assert!((opt.velocity[0].data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn grads_zeroed_after_step_and_frozen_untouched() {
        let mut params = one_param(1.0);
        let frozen = params.push("frozen.w", Tensor::new(vec![1], vec![2.0]).unwrap());
        let r = crate::tensor::ParamRef(0);
        params.get_mut(r).grad.data_mut()[0] = 1.0;
        params.get_mut(frozen).grad.data_mut()[0] = 5.0;
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0, nesterov: false };
        let mut opt = SgdState::new(&params, cfg, |n| !n.starts_with("frozen")).unwrap();
        opt.step(&mut params, 0.1).unwrap();
        assert_eq!(params.get(r).grad.data()[0], 0.0);
        assert_eq!(params.get(frozen).value.data()[0], 2.0);
        assert_eq!(params.get(frozen).grad.data()[0], 5.0);
    }

    #[test]
    fn schedule_warmup_and_milestones() {
        let s = LrSchedule { base_lr: 1.0, warmup_frac: 0.05, milestones: vec![0.6, 0.8], decay: 0.1 };
        let total = 40; // warmup = 2 epochs
        assert!((s.lr_at(0, total) - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.lr_at(1, total) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.lr_at(2, total) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(23, total) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(24, total) - 0.1).abs() < 1e-12); // 0.6*40 = 24
        assert!((s.lr_at(32, total) - 0.01).abs() < 1e-12); // 0.8*40 = 32
    }
}
