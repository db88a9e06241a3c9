//! Autoencoder training loop.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::TextSample;
use crate::error::{Error, Result};
use crate::util::image::Image;
use crate::util::optim::{AdamW, AdamWConfig};
use crate::util::rng::seeded_rng;

use super::{Tvqvae, TvqvaeConfig};

/// Optimization hyperparameters for [`train_tvqvae`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TvqvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Codebook entries start near zero but must reach the unit scale of
    /// the normalized content vectors; with adaptive updates moving ~lr
    /// per step they need a higher rate than the encoder/decoder.
    pub codebook_lr_mult: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Root seed for init, shuffling, and dead-code reseeding.
    pub seed: u64,
}

impl Default for TvqvaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 3e-4,
            codebook_lr_mult: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TvqvaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(self.codebook_lr_mult > 0.0 && self.codebook_lr_mult.is_finite()) {
            return Err(Error::config("codebook_lr_mult must be positive and finite"));
        }
        Ok(())
    }
}

/// Per-epoch training record (means over the epoch's batches).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TvqvaeEpochLog {
    pub epoch: usize,
    pub total: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Fraction of codebook entries selected at least once this epoch.
    pub utilization: f64,
}

/// Trains a fresh autoencoder on the given samples.
///
/// Requires at least 100 images (smaller corpora collapse the codebook
/// immediately and produce a useless tokenizer). Image tensors and
/// perceptual targets are computed once up front; each epoch shuffles with
/// its own derived seed. Codebook entries that go a whole epoch unused are
/// reseeded from that epoch's content vectors — except after the final
/// epoch, so the returned model's tokens match its last training state.
///
/// Returns the trained model and one log entry per epoch. A non-finite
/// loss aborts with [`Error::Diverged`].
pub fn train_tvqvae(
    samples: &[TextSample],
    cfg: &TvqvaeConfig,
    tcfg: &TvqvaeTrainConfig,
    device: &Device,
) -> Result<(Tvqvae, Vec<TvqvaeEpochLog>)> {
    tcfg.validate()?;
    if samples.len() < 100 {
        return Err(Error::validation(format!(
            "training needs at least 100 images, got {}",
            samples.len()
        )));
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let mut model = Tvqvae::new(cfg, tcfg.seed, DType::F32, device)?;
    let logs = train_tvqvae_model(&mut model, &images, tcfg, device)?;
    Ok((model, logs))
}

/// Inner loop over an already-constructed model (exposed for tests that
/// need custom init or dtype).
pub(crate) fn train_tvqvae_model(
    model: &mut Tvqvae,
    images: &[&Image],
    tcfg: &TvqvaeTrainConfig,
    device: &Device,
) -> Result<Vec<TvqvaeEpochLog>> {
    let cfg = model.cfg().clone();
    let all = Image::batch_to_tensor_refs(images, device)?.to_dtype(model.dtype())?;
    let target_features = model.perceptual().features(&all)?.detach();

    let adam_cfg = AdamWConfig {
        beta1: tcfg.beta1,
        beta2: tcfg.beta2,
        eps: 1e-8,
        weight_decay: tcfg.weight_decay,
    };
    // The codebook trains at its own rate (see `codebook_lr_mult`) and
    // without decay, which would drag rarely hit entries back toward zero.
    let (codebook_vars, model_vars): (Vec<_>, Vec<_>) = model
        .trainable()
        .into_iter()
        .partition(|(name, _)| name == "quantizer.embeddings");
    let mut opt_model = AdamW::new(model_vars, adam_cfg)?;
    let mut opt_codebook = AdamW::new(
        codebook_vars,
        AdamWConfig {
            weight_decay: 0.0,
            ..adam_cfg
        },
    )?;

    let n = images.len();
    let d = cfg.dim;
    let mut logs = Vec::with_capacity(tcfg.epochs);
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut seeded_rng(tcfg.seed, "tvqvae-epoch-order", &[epoch as u64]));

        let mut used = vec![false; cfg.n_codes];
        // Content vectors seen this epoch, reseed candidates for dead codes.
        let mut reservoir: Vec<Vec<f32>> = Vec::new();
        let mut sums = [0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let idx = Tensor::from_vec(chunk.to_vec(), chunk.len(), device)?;
            let batch = all.index_select(&idx, 0)?;
            let h_t = target_features.index_select(&idx, 0)?;

            let out = model.forward(&batch)?;
            let loss = model.loss(&out, &batch, Some(&h_t))?;
            let s = loss.scalars()?;
            if !s.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}: pixel={} perceptual={} \
                     codebook={} commitment={}",
                    s.pixel, s.perceptual, s.codebook, s.commitment
                )));
            }
            let grads = loss.total.backward()?;
            opt_model.step(&grads, tcfg.lr, tcfg.grad_clip)?;
            opt_codebook.step(&grads, tcfg.lr * tcfg.codebook_lr_mult, tcfg.grad_clip)?;

            for &k in &out.quant.z {
                used[k as usize] = true;
            }
            let flat = out
                .x_c
                .detach()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            reservoir.extend(flat.chunks_exact(d).map(<[f32]>::to_vec));

            sums[0] += s.total;
            sums[1] += s.pixel;
            sums[2] += s.perceptual;
            sums[3] += s.codebook;
            sums[4] += s.commitment;
            batches += 1;
        }

        let used_count = used.iter().filter(|&&u| u).count();
        logs.push(TvqvaeEpochLog {
            epoch,
            total: sums[0] / batches as f64,
            pixel: sums[1] / batches as f64,
            perceptual: sums[2] / batches as f64,
            codebook: sums[3] / batches as f64,
            commitment: sums[4] / batches as f64,
            utilization: used_count as f64 / cfg.n_codes as f64,
        });

        // Reviving dead codes after the last epoch would change tokens
        // relative to what training optimized, so skip it there.
        if epoch + 1 < tcfg.epochs {
            let dead: Vec<usize> = (0..cfg.n_codes).filter(|&k| !used[k]).collect();
            if !dead.is_empty() && !reservoir.is_empty() {
                use rand::Rng;
                let mut rng = seeded_rng(tcfg.seed, "tvqvae-reseed", &[epoch as u64]);
                let replacements: Vec<Vec<f32>> = dead
                    .iter()
                    .map(|_| reservoir[rng.gen_range(0..reservoir.len())].clone())
                    .collect();
                model.overwrite_codes(&dead, &replacements)?;
            }
        }
    }
    Ok(logs)
}
