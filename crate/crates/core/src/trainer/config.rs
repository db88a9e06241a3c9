//! Pretraining configuration, loss combination, and the learning-rate
//! schedule.
//!
//! The config is declarative TOML; every key has a default, so an empty
//! file (or no file) trains the full-size model:
//!
//! | key            | default | meaning                                       |
//! |----------------|---------|-----------------------------------------------|
//! | `lr_init`      | 1.5e-4  | peak learning rate after warmup               |
//! | `weight_decay` | 0.1     | decoupled AdamW decay                         |
//! | `beta1`        | 0.9     | AdamW first-moment coefficient                |
//! | `beta2`        | 0.95    | AdamW second-moment coefficient               |
//! | `epochs`       | 10      | passes over the training split                |
//! | `warmup_epochs`| 1       | linear-warmup length                          |
//! | `batch_size`   | 64      | images per step                               |
//! | `alpha`        | 0.1     | weight of the masked-reconstruction loss      |
//! | `beta`         | 1.0     | weight of the rearrangement loss              |
//! | `tau`          | 0.2     | contrastive temperature                       |
//! | `ema_m`        | 0.99    | momentum-branch decay                         |
//! | `mask_ratio`   | 0.75    | fraction of patch tokens masked               |
//! | `n_portions`   | 8       | vertical strips shuffled for rearrangement    |
//! | `seed`         | 0       | root seed for init and all per-step draws     |
//! | `grad_clip`    | 1.0     | global gradient-norm ceiling                  |
//! | `proj_hidden`  | 4096    | projection-head hidden width                  |
//! | `proj_dim`     | 256     | embedding width compared by the contrast loss |
//! | `pred_hidden`  | 4096    | prediction-head hidden width                  |
//! | `mim_blocks`   | 1       | cross-attention blocks over codebook latents  |
//! | `[vit]`        | —       | encoder geometry, see [`ViTConfig`]           |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretext::ViTConfig;
use crate::util::store::sha256_hex;

/// Hyperparameters for joint pretraining of the three pretext tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Weight of the masked-reconstruction loss in the total.
    pub alpha: f64,
    /// Weight of the rearrangement loss in the total.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Momentum-branch EMA decay.
    pub ema_m: f64,
    /// Fraction of patch tokens replaced by the mask token.
    pub mask_ratio: f64,
    /// Number of equal vertical strips shuffled for rearrangement.
    pub n_portions: usize,
    /// Root seed: parameter init and every per-step random draw derive
    /// from it, so a (config, corpus, codebook) triple fixes the run.
    pub seed: u64,
    /// Global gradient-norm ceiling applied before each optimizer step.
    pub grad_clip: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
    /// Number of stacked cross-attention blocks in the masked-image task.
    pub mim_blocks: usize,
    /// Encoder geometry.
    pub vit: ViTConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1.5e-4,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            epochs: 10,
            warmup_epochs: 1,
            batch_size: 64,
            alpha: 0.1,
            beta: 1.0,
            tau: 0.2,
            ema_m: 0.99,
            mask_ratio: 0.75,
            n_portions: 8,
            seed: 0,
            grad_clip: 1.0,
            proj_hidden: 4096,
            proj_dim: 256,
            pred_hidden: 4096,
            mim_blocks: 1,
            vit: ViTConfig::default(),
        }
    }
}

impl PretrainConfig {
    /// Small-encoder preset sized for single-core smoke runs: the desk
    /// [`ViTConfig::desk`] encoder with proportionally narrow heads.
    pub fn desk() -> Self {
        Self {
            proj_hidden: 192,
            proj_dim: 64,
            pred_hidden: 128,
            vit: ViTConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        let positive_finite: [(&str, f64); 4] = [
            ("lr_init", self.lr_init),
            ("tau", self.tau),
            ("grad_clip", self.grad_clip),
            ("mask_ratio", self.mask_ratio),
        ];
        for (name, v) in positive_finite {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative and finite"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::config("alpha and beta must be finite"));
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Error::config(format!("ema_m must lie in [0, 1], got {}", self.ema_m)));
        }
        if self.mask_ratio > 1.0 {
            return Err(Error::config(format!(
                "mask_ratio must lie in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 || self.pred_hidden == 0 {
            return Err(Error::config("head widths must be positive"));
        }
        if self.mim_blocks == 0 {
            return Err(Error::config("mim_blocks must be at least 1"));
        }
        let (_, gw) = self.vit.grid();
        if self.n_portions < 2 {
            return Err(Error::config("n_portions must be at least 2"));
        }
        if !self.vit.img_w.is_multiple_of(self.n_portions)
            || !gw.is_multiple_of(self.n_portions)
        {
            return Err(Error::config(format!(
                "n_portions {} must evenly divide both the image width {} and \
                 the token-grid width {gw}",
                self.n_portions, self.vit.img_w
            )));
        }
        Ok(())
    }

    /// Parses TOML text; unknown keys are rejected to catch typos.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::config(format!("pretrain config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical TOML rendering (fields in declaration order).
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("serializing config: {e}")))
    }

    /// Hash of the canonical rendering; checkpoints store it so a resume
    /// with a different configuration is refused instead of silently
    /// diverging.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml_string()?.as_bytes()))
    }

    /// Step counts for a training split of `n_samples` images. Partial
    /// trailing batches are dropped so every step sees a full batch.
    pub fn schedule(&self, n_samples: usize) -> Result<SchedulePlan> {
        let spe = n_samples / self.batch_size;
        if spe == 0 {
            return Err(Error::validation(format!(
                "{n_samples} samples cannot fill one batch of {}",
                self.batch_size
            )));
        }
        Ok(SchedulePlan {
            lr_init: self.lr_init,
            warmup_steps: (self.warmup_epochs * spe) as u64,
            total_steps: (self.epochs * spe) as u64,
            steps_per_epoch: spe as u64,
        })
    }
}

/// Resolved step counts for one run: the schedule works in steps, while the
/// config speaks in epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePlan {
    pub lr_init: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
}

/// Learning rate at `step`: linear warmup from 0 to `lr_init` over
/// `warmup_steps`, then cosine decay reaching 0 at the final step
/// (`total_steps - 1`). Steps at or past `total_steps` return 0.
///
/// `lr_schedule(0) == 0` whenever there is a warmup phase, and
/// `lr_schedule(warmup_steps) == lr_init` exactly; the two phases meet at
/// that point without a jump.
pub fn lr_schedule(step: u64, plan: &SchedulePlan) -> f64 {
    if step >= plan.total_steps {
        return 0.0;
    }
    if step < plan.warmup_steps {
        return plan.lr_init * step as f64 / plan.warmup_steps as f64;
    }
    let last = plan.total_steps - 1;
    if last <= plan.warmup_steps {
        // Degenerate run where warmup covers everything: hold the peak.
        return plan.lr_init;
    }
    let p = (step - plan.warmup_steps) as f64 / (last - plan.warmup_steps) as f64;
    plan.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// The three task losses and their weighted total for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    /// Contrastive (instance-discrimination) loss.
    pub l_c: f64,
    /// Masked-reconstruction loss.
    pub l_m: f64,
    /// Rearrangement loss.
    pub l_r: f64,
    /// `l_c + alpha*l_m + beta*l_r`.
    pub total: f64,
}

impl LossBundle {
    pub fn new(l_c: f64, l_m: f64, l_r: f64, alpha: f64, beta: f64) -> Result<Self> {
        Ok(Self {
            l_c,
            l_m,
            l_r,
            total: combine_losses(l_c, l_m, l_r, alpha, beta)?,
        })
    }
}

/// Weighted total of the three task losses. A non-finite input aborts with
/// a diagnostic naming the offending task, so divergence is reported at its
/// source rather than as an opaque NaN total.
pub fn combine_losses(l_c: f64, l_m: f64, l_r: f64, alpha: f64, beta: f64) -> Result<f64> {
    let named = [
        ("contrastive (L_c)", l_c),
        ("masked-reconstruction (L_m)", l_m),
        ("rearrangement (L_r)", l_r),
    ];
    for (task, v) in named {
        if !v.is_finite() {
            return Err(Error::Diverged(format!("{task} loss is {v}")));
        }
    }
    Ok(l_c + alpha * l_m + beta * l_r)
}

/// One metrics-log line; the pretrainer appends one JSON record per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    pub total: f64,
    pub lr: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_express_the_documented_recipe() {
        let c = PretrainConfig::default();
        assert_eq!(c.lr_init, 1.5e-4);
        assert_eq!(c.weight_decay, 0.1);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.95));
        assert_eq!(c.epochs, 10);
        assert_eq!(c.warmup_epochs, 1);
        assert_eq!(c.batch_size, 64);
        assert_eq!((c.alpha, c.beta), (0.1, 1.0));
        assert_eq!(c.tau, 0.2);
        assert_eq!(c.ema_m, 0.99);
        assert_eq!(c.mask_ratio, 0.75);
        assert_eq!(c.n_portions, 8);
        assert_eq!(c.grad_clip, 1.0);
        assert_eq!((c.proj_hidden, c.proj_dim, c.pred_hidden), (4096, 256, 4096));
        assert_eq!(c.mim_blocks, 1);
        c.validate().unwrap();
        PretrainConfig::desk().validate().unwrap();
    }

    #[test]
    fn empty_toml_yields_defaults_and_unknown_keys_are_rejected() {
        assert_eq!(PretrainConfig::from_toml_str("").unwrap(), PretrainConfig::default());
        let partial = PretrainConfig::from_toml_str("batch_size = 8\n[vit]\ndim = 96\nheads = 3\n")
            .unwrap();
        assert_eq!(partial.batch_size, 8);
        assert_eq!(partial.vit.dim, 96);
        assert_eq!(partial.vit.depth, 12, "unset nested keys keep defaults");
        assert!(PretrainConfig::from_toml_str("learning_rate = 1e-3").is_err());
    }

    #[test]
    fn toml_round_trip_preserves_config_and_hash() {
        let mut c = PretrainConfig::desk();
        c.seed = 17;
        c.epochs = 3;
        let text = c.to_toml_string().unwrap();
        let back = PretrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash().unwrap(), c.content_hash().unwrap());
        assert_ne!(
            PretrainConfig::default().content_hash().unwrap(),
            c.content_hash().unwrap()
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = PretrainConfig::default();
        for mutate in [
            (|c: &mut PretrainConfig| c.lr_init = 0.0) as fn(&mut PretrainConfig),
            |c| c.lr_init = f64::NAN,
            |c| c.weight_decay = -0.1,
            |c| c.beta1 = 1.0,
            |c| c.beta2 = -0.2,
            |c| c.epochs = 0,
            |c| c.warmup_epochs = 99,
            |c| c.batch_size = 0,
            |c| c.alpha = f64::INFINITY,
            |c| c.tau = -0.2,
            |c| c.ema_m = 1.5,
            |c| c.mask_ratio = 0.0,
            |c| c.mask_ratio = 1.25,
            |c| c.n_portions = 1,
            |c| c.n_portions = 5,
            |c| c.grad_clip = 0.0,
            |c| c.proj_dim = 0,
            |c| c.mim_blocks = 0,
        ] {
            let mut c = ok.clone();
            mutate(&mut c);
            assert!(c.validate().is_err(), "mutation should have been rejected");
        }
        ok.validate().unwrap();
    }

    #[test]
    fn combine_matches_hand_arithmetic() {
        assert!((combine_losses(1.0, 2.0, 3.0, 0.1, 1.0).unwrap() - 4.2).abs() < 1e-12);
        assert_eq!(combine_losses(0.0, 0.0, 0.0, 0.1, 1.0).unwrap(), 0.0);
        assert_eq!(combine_losses(0.7, 5.0, 9.0, 0.0, 0.0).unwrap(), 0.7);
    }

    #[test]
    fn combine_names_the_offending_task() {
        let err = combine_losses(1.0, f64::NAN, 0.0, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("masked-reconstruction"), "{err}");
        let err = combine_losses(f64::INFINITY, 0.0, 0.0, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("contrastive"), "{err}");
        let err = combine_losses(0.0, 0.0, f64::NEG_INFINITY, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("rearrangement"), "{err}");
    }

    #[test]
    fn bundle_total_obeys_the_weighted_sum_identity() {
        let b = LossBundle::new(2.5, 1.25, 0.5, 0.1, 1.0).unwrap();
        let expect = 2.5 + 0.1 * 1.25 + 1.0 * 0.5;
        assert!((b.total - expect).abs() <= 1e-9 * expect.abs());
    }

    #[test]
    fn schedule_hits_the_documented_anchor_points() {
        let plan = SchedulePlan {
            lr_init: 1.5e-4,
            warmup_steps: 10,
            total_steps: 111,
            steps_per_epoch: 10,
        };
        assert_eq!(lr_schedule(0, &plan), 0.0);
        assert_eq!(lr_schedule(10, &plan), 1.5e-4, "end of warmup is exactly lr_init");
        // Decay spans steps 10..=110; its midpoint sits at step 60.
        assert!((lr_schedule(60, &plan) - 0.75e-4).abs() < 1e-9);
        assert!(lr_schedule(110, &plan).abs() < 1e-19, "final step reaches 0");
        assert_eq!(lr_schedule(111, &plan), 0.0);
        assert_eq!(lr_schedule(1000, &plan), 0.0);
    }

    #[test]
    fn schedule_is_nonnegative_and_continuous_at_the_boundary() {
        let plan = SchedulePlan {
            lr_init: 3e-4,
            warmup_steps: 7,
            total_steps: 53,
            steps_per_epoch: 7,
        };
        let lr: Vec<f64> = (0..60).map(|s| lr_schedule(s, &plan)).collect();
        assert!(lr.iter().all(|&v| v >= 0.0));
        // No step-to-step jump exceeds the warmup increment, so the two
        // phases meet without a discontinuity.
        let warmup_increment = plan.lr_init / plan.warmup_steps as f64;
        for w in lr.windows(2) {
            assert!((w[1] - w[0]).abs() <= warmup_increment + 1e-12);
        }
        // Warmup rises, decay falls.
        assert!(lr[3] < lr[4]);
        assert!(lr[20] > lr[21]);
    }

    #[test]
    fn schedule_plan_drops_partial_batches() {
        let mut c = PretrainConfig::desk();
        c.batch_size = 32;
        c.epochs = 4;
        c.warmup_epochs = 1;
        let plan = c.schedule(200).unwrap();
        assert_eq!(plan.steps_per_epoch, 6);
        assert_eq!(plan.warmup_steps, 6);
        assert_eq!(plan.total_steps, 24);
        assert!(c.schedule(10).is_err(), "fewer samples than one batch");
    }

    #[test]
    fn degenerate_all_warmup_plan_holds_the_peak() {
        let plan = SchedulePlan {
            lr_init: 1e-3,
            warmup_steps: 5,
            total_steps: 5,
            steps_per_epoch: 1,
        };
        assert_eq!(lr_schedule(4, &plan), 1e-3 * 4.0 / 5.0);
        assert_eq!(lr_schedule(5, &plan), 0.0, "past the end");
    }
}
