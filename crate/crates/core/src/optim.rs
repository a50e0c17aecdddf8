//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Only read by SGD.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam()
    }
}

impl OptimizerConfig {
    /// Adam, lr 3.6e-4, weight decay 1e-5.
    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3.6e-4,
            weight_decay: 1e-5,
            momentum: 0.9,
        }
    }

    /// SGD with momentum 0.9, lr 1e-4, no weight decay.
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 1e-4,
            weight_decay: 0.0,
            momentum: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    CosineAnnealing,
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_max: usize,
    pub lr_min: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::cosine()
    }
}

impl ScheduleConfig {
    /// Cosine annealing over 50 epochs down to 3.4e-4.
    pub fn cosine() -> Self {
        Self {
            kind: ScheduleKind::CosineAnnealing,
            t_max: 50,
            lr_min: 3.4e-4,
            step_size: 20,
            gamma: 0.5,
        }
    }

    /// Halve every 20 epochs.
    pub fn step() -> Self {
        Self {
            kind: ScheduleKind::Step,
            ..Self::cosine()
        }
    }

    pub fn validate(&self, lr0: f64) -> Result<()> {
        match self.kind {
            ScheduleKind::CosineAnnealing => {
                if self.t_max == 0 {
                    return Err(config("t_max must be at least 1"));
                }
                if !(self.lr_min >= 0.0 && self.lr_min <= lr0) {
                    return Err(config(format!("lr_min {} must lie in [0, {lr0}]", self.lr_min)));
                }
            }
            ScheduleKind::Step => {
                if self.step_size == 0 || !(self.gamma > 0.0 && self.gamma <= 1.0) {
                    return Err(config("step schedule needs step_size ≥ 1 and gamma in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize, lr0: f64) -> f64 {
        match self.kind {
            ScheduleKind::CosineAnnealing => cosine_lr(epoch, self, lr0),
            ScheduleKind::Step => step_lr(epoch, self, lr0),
        }
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·epoch/t_max))`, held at `lr_min` past `t_max`.
pub fn cosine_lr(epoch: usize, cfg: &ScheduleConfig, lr0: f64) -> f64 {
    if epoch >= cfg.t_max {
        return cfg.lr_min;
    }
    if epoch == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * epoch as f64 / cfg.t_max as f64;
    cfg.lr_min + 0.5 * (lr0 - cfg.lr_min) * (1.0 + phase.cos())
}

pub fn step_lr(epoch: usize, cfg: &ScheduleConfig, lr0: f64) -> f64 {
    lr0 * cfg.gamma.powi((epoch / cfg.step_size.max(1)) as i32)
}

/// Adam (L2-coupled weight decay) or SGD with momentum over one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ParamSet) -> Result<Self> {
        cfg.validate()?;
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Ok(Self {
            cfg,
            first: zeros(),
            second: if cfg.kind == OptimizerKind::Adam { zeros() } else { Vec::new() },
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr`. With `lr == 0` parameters are left bitwise untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.first.len() {
            return Err(shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let wd = self.cfg.weight_decay;
        match self.cfg.kind {
            OptimizerKind::Adam => {
                let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    if grads[i].shape() != p.shape() {
                        return Err(shape(format!("gradient {:?} for parameter {:?}", grads[i].shape(), p.shape())));
                    }
                    let (m, v) = (self.first[i].data_mut(), self.second[i].data_mut());
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grads[i].data()[j] + wd * *w;
                        m[j] = b1 * m[j] + (1.0 - b1) * g;
                        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                        if lr != 0.0 {
                            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        }
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = self.cfg.momentum;
                for (i, p) in params.tensors_mut().iter_mut().enumerate() {
                    if grads[i].shape() != p.shape() {
                        return Err(shape(format!("gradient {:?} for parameter {:?}", grads[i].shape(), p.shape())));
                    }
                    let buf = self.first[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let g = grads[i].data()[j] + wd * *w;
                        buf[j] = mu * buf[j] + g;
                        if lr != 0.0 {
                            *w -= lr * buf[j];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let cfg = ScheduleConfig::cosine();
        assert_eq!(cosine_lr(0, &cfg, 3.6e-4), 3.6e-4);
        assert_eq!(cosine_lr(50, &cfg, 3.6e-4), 3.4e-4);
        assert!((cosine_lr(25, &cfg, 3.6e-4) - 3.5e-4).abs() < 1e-12);
        assert_eq!(cosine_lr(80, &cfg, 3.6e-4), 3.4e-4);
    }

    #[test]
    fn step_schedule_halves() {
        let cfg = ScheduleConfig::step();
        assert_eq!(step_lr(0, &cfg, 1e-4), 1e-4);
        assert_eq!(step_lr(19, &cfg, 1e-4), 1e-4);
        assert_eq!(step_lr(20, &cfg, 1e-4), 5e-5);
        assert_eq!(step_lr(45, &cfg, 1e-4), 2.5e-5);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig { lr: 0.0, ..OptimizerConfig::adam() }.validate().is_err());
        assert!(OptimizerConfig { weight_decay: -1.0, ..OptimizerConfig::adam() }.validate().is_err());
        assert!(ScheduleConfig { t_max: 0, ..ScheduleConfig::cosine() }.validate(1e-3).is_err());
        assert!(ScheduleConfig::cosine().validate(3.0e-4).is_err());
        assert!(ScheduleConfig::cosine().validate(3.6e-4).is_ok());
    }

    fn quadratic_params() -> ParamSet {
        let mut p = ParamSet::default();
        p.push("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        p
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        for cfg in [OptimizerConfig::adam(), OptimizerConfig::sgd()] {
            let mut p = quadratic_params();
            p.push("z", Tensor::new(vec![2], vec![-0.0, 0.0]).unwrap());
            let before = p.clone();
            let mut opt = Optimizer::new(cfg, &p).unwrap();
            let grads = vec![Tensor::full(&[3], 0.7), Tensor::full(&[2], -0.3)];
            opt.step(&mut p, &grads, 0.0).unwrap();
            for (a, b) in p.tensors().iter().zip(before.tensors()) {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = quadratic_params();
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::adam() };
        let mut opt = Optimizer::new(cfg, &p).unwrap();
        let g = Tensor::new(vec![3], vec![2.0, -4.0, 0.1]).unwrap();
        opt.step(&mut p, &[g], 0.01).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        let expected = [0.99, -1.99, 0.49];
        for (a, b) in p.tensors()[0].data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn optimizers_minimize_quadratic() {
        for (cfg, lr) in [(OptimizerConfig::adam(), 0.05), (OptimizerConfig::sgd(), 0.05)] {
            let mut p = quadratic_params();
            let mut opt = Optimizer::new(cfg, &p).unwrap();
            for _ in 0..500 {
                let g = p.tensors()[0].map(|v| 2.0 * v);
                opt.step(&mut p, &[g], lr).unwrap();
            }
            assert!(p.tensors()[0].sq_norm() < 1e-3, "{cfg:?}");
        }
    }

    proptest! {
        #[test]
        fn cosine_monotone_and_bounded(t_max in 1usize..200, lr0 in 1e-5f64..1e-1, frac in 0.0f64..1.0) {
            let cfg = ScheduleConfig { t_max, lr_min: lr0 * frac, ..ScheduleConfig::cosine() };
            let mut prev = f64::INFINITY;
            for e in 0..=t_max + 2 {
                let lr = cosine_lr(e, &cfg, lr0);
                prop_assert!(lr <= prev + 1e-18);
                prop_assert!(lr >= cfg.lr_min - 1e-18 && lr <= lr0 + 1e-18);
                prev = lr;
            }
        }
    }
}
