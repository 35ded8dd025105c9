use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_init: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr_min() -> f64 {
    1e-4
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

impl OptimizerConfig {
    pub fn new(lr_init: f64) -> Self {
        Self {
            lr_init,
            lr_min: default_lr_min(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return Err(Error::invalid("need 0 <= lr_min <= lr_init, lr_init > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_init` at epoch 0 to `lr_min` at `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_init: f64,
    pub lr_min: f64,
    pub total_epochs: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.lr_init;
        }
        let progress = epoch.min(self.total_epochs) as f64 / self.total_epochs as f64;
        self.lr_min + 0.5 * (self.lr_init - self.lr_min) * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: CosineSchedule,
    velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, model: &ModelState, total_epochs: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            schedule: CosineSchedule {
                lr_init: config.lr_init,
                lr_min: config.lr_min,
                total_epochs,
            },
            velocity: model
                .params()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        })
    }

    pub fn velocity(&self) -> &[Matrix] {
        &self.velocity
    }
}

/// `v ← μ·v + g + wd·θ`, then `θ ← θ − lr(epoch)·v`.
pub fn sgd_step(
    model: &mut ModelState,
    optimizer: &mut OptimizerState,
    gradients: &[Matrix],
    epoch: usize,
) -> Result<()> {
    if gradients.len() != model.params().len()
        || gradients.iter().zip(model.params()).any(|(g, p)| g.shape() != p.shape())
        || optimizer.velocity.len() != gradients.len()
    {
        return Err(Error::invalid("gradient shapes do not match parameters"));
    }
    let lr = optimizer.schedule.lr(epoch);
    let (mu, wd) = (optimizer.momentum, optimizer.weight_decay);
    for ((param, vel), grad) in model.params_mut().iter_mut().zip(optimizer.velocity.iter_mut()).zip(gradients) {
        for ((p, v), g) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad.data()) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}
