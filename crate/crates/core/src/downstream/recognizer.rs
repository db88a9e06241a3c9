//! Text recognizer: the pretraining encoder plus a linear CTC head.
//!
//! The encoder's 8×16 token grid is pooled column-wise into 16 frames —
//! one per token column, mean over the 8 rows — and a single linear layer
//! maps each frame to blank-plus-charset logits. Training comes in two
//! modes: a probe freezes the encoder (features are computed once and the
//! head alone is optimized), a fine-tune updates everything. The probe is
//! the standard way to measure how much transcription signal pretraining
//! put into the encoder, because the head is too small to learn the task
//! on its own.

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module};
use rand::seq::SliceRandom;

use crate::corpus::TextSample;
use crate::downstream::ctc::{
    ctc_greedy_decode_batch, ctc_loss_with_labels, min_timesteps, transcript_labels, word_accuracy,
    CTC_CLASSES,
};
use crate::downstream::EvalReport;
use crate::error::{Error, Result};
use crate::pretext::{instance_map, ViTConfig, ViTEncoder};
use crate::tvqvae::linear;
use crate::util::image::Image;
use crate::util::optim::{AdamW, AdamWConfig};
use crate::util::params::ParamStore;
use crate::util::rng::seeded_rng;
use crate::util::store::{sha256_hex, TensorStore};

/// Forward chunk size used when featurizing or scoring whole corpora.
const EVAL_CHUNK: usize = 256;

/// Encoder backbone with a linear per-frame CTC head.
pub struct RecognizerModel {
    vit_cfg: ViTConfig,
    store: ParamStore,
    encoder: ViTEncoder,
    head: Linear,
}

impl RecognizerModel {
    /// Fresh recognizer with seed-deterministic random weights. Parameter
    /// names: `vit.*` for the encoder, `ctc.*` for the head.
    pub fn new(vit_cfg: &ViTConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut store = ParamStore::new(dtype, device);
        let mut rng = seeded_rng(seed, "recognizer-init", &[]);
        let encoder = ViTEncoder::new(&mut store, "vit", vit_cfg, &mut rng)?;
        let head = linear(&mut store, "ctc", vit_cfg.dim, CTC_CLASSES, &mut rng)?;
        Ok(Self {
            vit_cfg: vit_cfg.clone(),
            store,
            encoder,
            head,
        })
    }

    /// Copies every `vit.*` parameter value from `source` — typically the
    /// online branch of a pretraining checkpoint. Shapes must match, so the
    /// source must have been built with the same encoder geometry. Head
    /// parameters are untouched.
    pub fn adopt_encoder(&mut self, source: &ParamStore) -> Result<()> {
        for (name, var) in self.store.named() {
            if name.starts_with("vit.") {
                let src = source.get(name)?;
                var.set(&src.as_tensor().to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }

    /// Hash of the encoder parameters only. Stable under head updates, so
    /// probe training must leave it unchanged.
    pub fn encoder_hash(&self) -> Result<String> {
        self.hash_subset("vit.")
    }

    /// Hash of the head parameters only.
    pub fn head_hash(&self) -> Result<String> {
        self.hash_subset("ctc.")
    }

    fn hash_subset(&self, prefix: &str) -> Result<String> {
        let mut store = TensorStore::new();
        for (name, var) in self.store.named() {
            if name.starts_with(prefix) {
                store.insert(name, var.as_tensor())?;
            }
        }
        Ok(sha256_hex(&store.to_bytes()))
    }

    /// Number of CTC timesteps the head emits: one per token column.
    pub fn timesteps(&self) -> usize {
        self.vit_cfg.grid().1
    }

    /// `(B, 3, H, W)` images → `(B, timesteps, dim)` column features.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.encoder.forward(images)?;
        instance_map(&tokens, self.vit_cfg.grid(), self.timesteps())
    }

    /// Head only: `(B, timesteps, dim)` → `(B, timesteps, 37)` logits.
    pub fn logits_from_features(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(features)?)
    }

    /// Full forward pass: images → per-column CTC logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let features = self.features(images)?;
        self.logits_from_features(&features)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn vit_cfg(&self) -> &ViTConfig {
        &self.vit_cfg
    }
}

/// Hyperparameters for [`train_recognizer`].
#[derive(Debug, Clone)]
pub struct RecognizerTrainConfig {
    pub epochs: usize,
    /// Samples per step; partial trailing batches are dropped.
    pub batch_size: usize,
    /// Constant learning rate — head-probe training is short enough that a
    /// schedule buys nothing.
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// When set, encoder parameters are excluded from the optimizer and
    /// features are computed once up front.
    pub freeze_encoder: bool,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            freeze_encoder: true,
        }
    }
}

impl RecognizerTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr {} must be finite and > 0", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be finite and > 0"));
        }
        Ok(())
    }
}

/// Minimizes CTC loss over `samples`; returns the mean loss per epoch.
///
/// Labels come from the sample transcripts; a transcript that cannot fit
/// the head's timestep budget is a validation error. Needs at least one
/// full batch of samples.
pub fn train_recognizer(
    model: &mut RecognizerModel,
    samples: &[TextSample],
    cfg: &RecognizerTrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = samples.len();
    if n < cfg.batch_size {
        return Err(Error::validation(format!(
            "{n} samples cannot fill one batch of {}",
            cfg.batch_size
        )));
    }
    let t = model.timesteps();
    let labels = samples
        .iter()
        .map(|s| {
            let l = transcript_labels(&s.transcript)?;
            if min_timesteps(&l) > t {
                return Err(Error::validation(format!(
                    "transcript {:?} needs {} timesteps, head emits {t}",
                    s.transcript,
                    min_timesteps(&l)
                )));
            }
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;

    let device = model.store.device().clone();
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    // Frozen encoder: featurize the corpus once and train on cached
    // features; otherwise keep raw pixels and run the encoder per batch.
    let (inputs, frozen) = if cfg.freeze_encoder {
        let mut chunks = Vec::new();
        for chunk in images.chunks(EVAL_CHUNK) {
            let pixels = Image::batch_to_tensor_refs(chunk, &device)?;
            chunks.push(model.features(&pixels)?.detach());
        }
        (Tensor::cat(&chunks, 0)?, true)
    } else {
        (Image::batch_to_tensor_refs(&images, &device)?, false)
    };

    let params: Vec<_> = model
        .store
        .named()
        .filter(|(name, _)| !frozen || name.starts_with("ctc."))
        .map(|(name, var)| (name.to_string(), var.clone()))
        .collect();
    let mut opt = AdamW::new(
        params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    )?;

    let steps_per_epoch = n / cfg.batch_size;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut rng = seeded_rng(cfg.seed, "recognizer-epoch", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let ids = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let idx = Tensor::from_vec(ids.to_vec(), ids.len(), &device)?;
            let batch = inputs.index_select(&idx, 0)?;
            let logits = if frozen {
                model.logits_from_features(&batch)?
            } else {
                model.forward(&batch)?
            };
            let batch_labels: Vec<Vec<usize>> =
                ids.iter().map(|&i| labels[i as usize].clone()).collect();
            let loss = ctc_loss_with_labels(&logits, &batch_labels)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "CTC loss became {value} at epoch {epoch} step {step}"
                )));
            }
            let grads = loss.backward()?;
            opt.step(&grads, cfg.lr, Some(cfg.grad_clip))?;
            epoch_loss += value;
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok(epoch_losses)
}

/// Greedy-decodes `samples` and reports case-folded word accuracy.
pub fn evaluate_recognizer(
    model: &RecognizerModel,
    samples: &[TextSample],
    split: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    let device = model.store.device().clone();
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let pixels = Image::batch_to_tensor_refs(&images, &device)?;
        let logits = model.forward(&pixels)?;
        predictions.extend(ctc_greedy_decode_batch(&logits)?);
    }
    let references: Vec<String> = samples.iter().map(|s| s.transcript.clone()).collect();
    let accuracy = word_accuracy(&predictions, &references)?;
    let report = EvalReport {
        split: split.to_string(),
        word_accuracy: Some(accuracy),
        psnr: None,
        ssim: None,
        samples: samples.len(),
        config_hash: config_hash.to_string(),
    };
    report.validate()?;
    Ok(report)
}
