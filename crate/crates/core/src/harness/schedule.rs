use std::f64::consts::PI;

use crate::error::{contract_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Equal-weight binary cross-entropy and soft Dice.
    BceDice,
    Bce,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "bcedice" | "default" => Ok(LossKind::BceDice),
            "bce" => Ok(LossKind::Bce),
            _ => Err(Error::Config(format!("unknown loss kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub wd_start: f64,
    pub wd_end: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub loss_kind: LossKind,
    /// Also supervise every side prediction.
    pub deep_supervision: bool,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr_init: 1e-3,
            lr_min: 1e-7,
            warmup_epochs: 2,
            wd_start: 0.05,
            wd_end: 0.04,
            betas: (0.9, 0.999),
            eps: 1e-8,
            loss_kind: LossKind::BceDice,
            deep_supervision: false,
            threshold: 0.5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!("warmup of {} epochs needs more than {} epochs", self.warmup_epochs, self.epochs));
        }
        if !(self.lr_min <= self.lr_init) || self.lr_min < 0.0 {
            return fail(format!("lr_min {} must lie in [0, lr_init {}]", self.lr_min, self.lr_init));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return fail("betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    fn check_epoch(&self, epoch: usize) -> Result<()> {
        if epoch >= self.epochs {
            return Err(contract_err!("epoch {epoch} outside [0, {})", self.epochs));
        }
        Ok(())
    }
}

/// Linear warm-up to `lr_init` over the first `warmup_epochs`, then cosine
/// annealing that reaches `lr_min` at the final epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    config.check_epoch(epoch)?;
    let w = config.warmup_epochs;
    if epoch < w {
        return Ok(config.lr_init * (epoch + 1) as f64 / w as f64);
    }
    let span = (config.epochs - 1 - w).max(1) as f64;
    let progress = (epoch - w) as f64 / span;
    Ok(config.lr_min + 0.5 * (config.lr_init - config.lr_min) * (1.0 + (PI * progress).cos()))
}

/// Linear interpolation from `wd_start` at epoch 0 to `wd_end` at the final
/// epoch.
pub fn wd_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    config.check_epoch(epoch)?;
    let t = epoch as f64 / (config.epochs - 1).max(1) as f64;
    Ok(config.wd_start + (config.wd_end - config.wd_start) * t)
}
