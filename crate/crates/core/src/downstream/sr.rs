//! Super-resolution head: the pretraining encoder plus a small conv decoder.
//!
//! Low-resolution crops are first brought to working size with bicubic
//! interpolation, then encoded; the token grid is reshaped into a feature
//! map, nearest-upsampled back to pixel resolution, and refined by three
//! resolution-preserving 3×3 conv layers that predict a residual over the
//! bicubic image. Training minimizes pixel MSE against the ground-truth
//! crop before the final clamp, so gradients keep flowing at saturated
//! pixels; inference output is clamped into `[0, 1]`.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::corpus::SrPair;
use crate::downstream::quality::{psnr, ssim};
use crate::downstream::EvalReport;
use crate::error::{Error, Result};
use crate::pretext::{ViTConfig, ViTEncoder};
use crate::util::image::Image;
use crate::util::optim::{AdamW, AdamWConfig};
use crate::util::params::ParamStore;
use crate::util::resize::resize_bicubic;
use crate::util::rng::seeded_rng;
use crate::util::store::{sha256_hex, TensorStore};

/// Forward chunk size for whole-set evaluation.
const EVAL_CHUNK: usize = 128;

/// One 3×3 same-resolution conv with bias.
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    out_channels: usize,
}

impl ConvLayer {
    fn new(
        params: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: params.kaiming(&format!("{name}.weight"), &[out_ch, in_ch, 3, 3], rng)?,
            bias: params.zeros(&format!("{name}.bias"), &[out_ch])?,
            out_channels: out_ch,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, 1, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1, 1))?)?)
    }
}

/// Encoder backbone with a residual conv decoder.
pub struct SrModel {
    vit_cfg: ViTConfig,
    store: ParamStore,
    encoder: ViTEncoder,
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
}

impl SrModel {
    /// Fresh model with seed-deterministic weights. Parameter names:
    /// `vit.*` for the encoder, `sr.conv{1,2,3}.*` for the decoder.
    /// `decoder_width` is the hidden channel count of the first two convs.
    pub fn new(
        vit_cfg: &ViTConfig,
        decoder_width: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if decoder_width == 0 {
            return Err(Error::config("decoder_width must be positive"));
        }
        let mut store = ParamStore::new(dtype, device);
        let mut rng = seeded_rng(seed, "sr-init", &[]);
        let encoder = ViTEncoder::new(&mut store, "vit", vit_cfg, &mut rng)?;
        let conv1 = ConvLayer::new(&mut store, "sr.conv1", vit_cfg.dim, decoder_width, &mut rng)?;
        let conv2 = ConvLayer::new(&mut store, "sr.conv2", decoder_width, decoder_width, &mut rng)?;
        let conv3 = ConvLayer::new(&mut store, "sr.conv3", decoder_width, 3, &mut rng)?;
        Ok(Self {
            vit_cfg: vit_cfg.clone(),
            store,
            encoder,
            conv1,
            conv2,
            conv3,
        })
    }

    /// Copies `vit.*` values from `source` (e.g. a pretraining checkpoint's
    /// online branch); decoder weights are untouched.
    pub fn adopt_encoder(&mut self, source: &ParamStore) -> Result<()> {
        for (name, var) in self.store.named() {
            if name.starts_with("vit.") {
                let src = source.get(name)?;
                var.set(&src.as_tensor().to_dtype(var.dtype())?)?;
            }
        }
        Ok(())
    }

    /// Hash over encoder parameters only.
    pub fn encoder_hash(&self) -> Result<String> {
        self.hash_subset("vit.")
    }

    /// Hash over decoder parameters only.
    pub fn decoder_hash(&self) -> Result<String> {
        self.hash_subset("sr.")
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

    /// Pre-clamp prediction for `(B, 3, H, W)` bicubic-upsampled inputs:
    /// input plus the decoder's residual.
    pub fn forward_raw(&self, upsampled: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = upsampled.dims4()?;
        let (gh, gw) = self.vit_cfg.grid();
        let tokens = self.encoder.forward(upsampled)?; // (B, gh·gw, D)
        let grid = tokens
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, self.vit_cfg.dim, gh, gw))?;
        let fmap = nearest_upsample(&grid, h / gh, w / gw)?;
        let x = self.conv1.forward(&fmap)?.gelu()?;
        let x = self.conv2.forward(&x)?.gelu()?;
        let residual = self.conv3.forward(&x)?;
        Ok(upsampled.add(&residual)?)
    }

    /// Inference output, clamped into `[0, 1]`.
    pub fn forward(&self, upsampled: &Tensor) -> Result<Tensor> {
        Ok(self.forward_raw(upsampled)?.clamp(0f64, 1f64)?)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn vit_cfg(&self) -> &ViTConfig {
        &self.vit_cfg
    }
}

/// Nearest-neighbor upsample of a `(B, C, H, W)` map by integer factors,
/// written as broadcast-and-reshape so the backward pass is a plain
/// sum-reduce (the built-in upsample op cannot differentiate through
/// distinct per-axis factors).
fn nearest_upsample(x: &Tensor, sh: usize, sw: usize) -> Result<Tensor> {
    if sh == 0 || sw == 0 {
        return Err(Error::validation("upsample factors must be positive"));
    }
    let (b, c, h, w) = x.dims4()?;
    let out = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, sh, w, sw))?
        .contiguous()?
        .reshape((b, c, h * sh, w * sw))?;
    Ok(out)
}

/// Bicubic-upsamples every low-resolution crop to its pair's high-resolution
/// size and stacks `(inputs, targets)` batch tensors.
pub fn sr_batch(pairs: &[SrPair], device: &Device) -> Result<(Tensor, Tensor)> {
    if pairs.is_empty() {
        return Err(Error::validation("no SR pairs given"));
    }
    let upsampled: Vec<Image> = pairs
        .iter()
        .map(|p| resize_bicubic(&p.lr, p.hr.height(), p.hr.width()))
        .collect();
    let inputs = Image::batch_to_tensor(&upsampled, device)?;
    let targets: Vec<&Image> = pairs.iter().map(|p| &p.hr).collect();
    Ok((inputs, Image::batch_to_tensor_refs(&targets, device)?))
}

/// Hyperparameters for [`train_sr`].
#[derive(Debug, Clone)]
pub struct SrTrainConfig {
    pub epochs: usize,
    /// Pairs per step; partial trailing batches are dropped.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Fine-tuning trains the encoder too; set to restrict the optimizer
    /// to the decoder.
    pub freeze_encoder: bool,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            freeze_encoder: false,
        }
    }
}

/// Minimizes pre-clamp pixel MSE over `pairs`; returns per-epoch mean loss.
pub fn train_sr(model: &mut SrModel, pairs: &[SrPair], cfg: &SrTrainConfig) -> Result<Vec<f64>> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::config("epochs and batch_size must be positive"));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) || !(cfg.grad_clip.is_finite() && cfg.grad_clip > 0.0)
    {
        return Err(Error::config("lr and grad_clip must be finite and > 0"));
    }
    let n = pairs.len();
    if n < cfg.batch_size {
        return Err(Error::validation(format!(
            "{n} pairs cannot fill one batch of {}",
            cfg.batch_size
        )));
    }
    let device = model.store.device().clone();
    let (inputs, targets) = sr_batch(pairs, &device)?;

    let params: Vec<_> = model
        .store
        .named()
        .filter(|(name, _)| !cfg.freeze_encoder || name.starts_with("sr."))
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
        let mut rng = seeded_rng(cfg.seed, "sr-epoch", &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let ids = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let idx = Tensor::from_vec(ids.to_vec(), ids.len(), &device)?;
            let x = inputs.index_select(&idx, 0)?;
            let y = targets.index_select(&idx, 0)?;
            let pred = model.forward_raw(&x)?;
            let loss = pred.sub(&y)?.sqr()?.mean_all()?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "SR loss became {value} at epoch {epoch} step {step}"
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

/// Mean PSNR/SSIM of model outputs against the high-resolution targets.
pub fn evaluate_sr(
    model: &SrModel,
    pairs: &[SrPair],
    split: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    let device = model.store.device().clone();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let (inputs, _) = sr_batch(chunk, &device)?;
        let outputs = model.forward(&inputs)?;
        for (i, pair) in chunk.iter().enumerate() {
            let img = Image::from_chw_tensor(&outputs.narrow(0, i, 1)?.squeeze(0)?)?;
            psnr_sum += psnr(&img, &pair.hr)?;
            ssim_sum += ssim(&img, &pair.hr)?;
        }
    }
    let n = pairs.len() as f64;
    let report = EvalReport {
        split: split.to_string(),
        word_accuracy: None,
        psnr: Some(psnr_sum / n),
        ssim: Some(ssim_sum / n),
        samples: pairs.len(),
        config_hash: config_hash.to_string(),
    };
    report.validate()?;
    Ok(report)
}

/// Mean PSNR/SSIM of plain bicubic upsampling against the targets — the
/// baseline a trained model has to beat.
pub fn bicubic_baseline(pairs: &[SrPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::validation("no SR pairs given"));
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for pair in pairs {
        let up = resize_bicubic(&pair.lr, pair.hr.height(), pair.hr.width());
        psnr_sum += psnr(&up, &pair.hr)?;
        ssim_sum += ssim(&up, &pair.hr)?;
    }
    let n = pairs.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}
