use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::objectives::{LossWeights, Stage};

/// Which text the fine-grained alignment targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FgTextMode {
    /// Per-instance attribute description.
    #[default]
    FineGrained,
    /// Every clip gets its category's description instead.
    ClassLevel,
}

impl std::fmt::Display for FgTextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FgTextMode::FineGrained => "fine_grained",
            FgTextMode::ClassLevel => "class_level",
        })
    }
}

/// Switches for the ablation study. All on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub fg_sa: bool,
    pub cp_a: bool,
    /// Two-stage schedule; off optimizes every objective from step 0.
    pub ml_co: bool,
    pub fg_text: FgTextMode,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            fg_sa: true,
            cp_a: true,
            ml_co: true,
            fg_text: FgTextMode::FineGrained,
        }
    }
}

impl Components {
    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Fraction of epochs spent in Stage1, open interval (0, 1).
    pub stage1_fraction: f64,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Restart warmup + cosine when Stage2 begins.
    pub rewarm_stage2: bool,
    pub loss: LossWeights,
    pub components: Components,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            stage1_fraction: 0.4,
            peak_lr: 1e-3,
            warmup_ratio: 0.03,
            weight_decay: 0.05,
            clip_norm: 1.0,
            batch_size: 8,
            grad_accum_steps: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            rewarm_stage2: false,
            loss: LossWeights::default(),
            components: Components::default(),
        }
    }
}

/// `ceil(x)` that treats products landing within rounding noise of an
/// integer as that integer (0.07 · 100 is 7, not 8).
pub(crate) fn ceil_product(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, Config, "train.epochs must be >= 1");
        ensure!(
            self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0,
            Config,
            "train.stage1_fraction must lie in the open interval (0, 1), got {}",
            self.stage1_fraction
        );
        ensure!(
            self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0,
            Config,
            "train.warmup_ratio must lie in (0, 1), got {}",
            self.warmup_ratio
        );
        ensure!(
            self.clip_norm > 0.0 && self.clip_norm.is_finite(),
            Config,
            "train.clip_norm must be > 0, got {}",
            self.clip_norm
        );
        ensure!(
            self.peak_lr >= 0.0 && self.peak_lr.is_finite(),
            Config,
            "train.peak_lr must be finite and >= 0"
        );
        ensure!(self.weight_decay >= 0.0, Config, "train.weight_decay must be >= 0");
        ensure!(self.batch_size >= 1, Config, "train.batch_size must be >= 1");
        ensure!(self.grad_accum_steps >= 1, Config, "train.grad_accum_steps must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Config,
            "train.beta1 / train.beta2 must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, Config, "train.eps must be > 0");
        self.loss.validate()
    }

    /// Number of leading epochs trained in Stage1.
    pub fn stage1_epochs(&self) -> usize {
        ceil_product(self.stage1_fraction, self.epochs)
    }

    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size).div_ceil(self.grad_accum_steps)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * self.steps_per_epoch(train_len)
    }

    /// Learning rate of optimizer step `step`, honouring `rewarm_stage2`.
    pub fn lr_for_step(&self, step: usize, train_len: usize) -> Result<f64> {
        let total = self.total_steps(train_len);
        let s1 = self.stage1_epochs() * self.steps_per_epoch(train_len);
        if self.rewarm_stage2 && self.components.ml_co && s1 > 0 && s1 < total {
            if step < s1 {
                return lr_at(step, s1, self);
            }
            return lr_at(step - s1, total - s1, self);
        }
        lr_at(step, total, self)
    }
}

pub fn stage_of(epoch: usize, cfg: &TrainConfig) -> Stage {
    if cfg.components.ml_co && epoch < cfg.stage1_epochs() {
        Stage::Stage1
    } else {
        Stage::Stage2
    }
}

/// Linear warmup over `W = ceil(warmup_ratio · total)` steps, then cosine
/// decay to zero at `total`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    ensure!(total_steps > 0, InvalidArgument, "total_steps must be > 0");
    ensure!(
        step <= total_steps,
        InvalidArgument,
        "step {step} beyond total_steps {total_steps}"
    );
    let w = ceil_product(cfg.warmup_ratio, total_steps).max(1);
    let peak = cfg.peak_lr;
    if step < w {
        return Ok(peak * step as f64 / w as f64);
    }
    if total_steps == w {
        return Ok(peak);
    }
    let progress = (step - w) as f64 / (total_steps - w) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
