//! Masked-token reconstruction guided by codebook latents.
//!
//! A fixed fraction of patch tokens is replaced with a learned mask token
//! right after patch embedding. After the encoder runs, a cross-attention
//! block injects the image's eight retrieved codebook latents into every
//! token, a per-token linear decoder maps back to pixels, and the loss is
//! L1 averaged over masked pixels only — visible pixels contribute nothing,
//! in value or gradient.

use candle_core::{D, Tensor};
use candle_nn::{Linear, Module};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tvqvae::unpatchify;
use crate::util::params::ParamStore;
use crate::util::rng::seeded_rng;

/// Which token positions of one image are masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    total: usize,
    masked: Vec<usize>,
}

impl MaskPlan {
    /// Number of tokens in the full grid.
    pub fn total(&self) -> usize {
        self.total
    }

    /// Masked positions, ascending.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn mask_count(&self) -> usize {
        self.masked.len()
    }
}

/// Samples a mask plan covering exactly `round(ratio · n_tokens)` distinct
/// positions. The count is exact for every seed; only which positions are
/// chosen varies.
pub fn make_mask_plan(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if ratio.is_nan() || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if n_tokens == 0 {
        return Err(Error::validation("cannot mask an empty token grid"));
    }
    let count = (ratio * n_tokens as f64).round() as usize;
    let mut rng = seeded_rng(seed, "mask-plan", &[]);
    let mut masked = rand::seq::index::sample(&mut rng, n_tokens, count).into_vec();
    masked.sort_unstable();
    Ok(MaskPlan {
        total: n_tokens,
        masked,
    })
}

/// Replaces masked token embeddings with `mask_token`: `(B, T, D)` tokens,
/// one plan per image, `(D,)` learnable mask token. Visible tokens pass
/// through bit-for-bit; gradients reach `mask_token` through masked slots.
pub fn apply_mask(tokens: &Tensor, plans: &[MaskPlan], mask_token: &Tensor) -> Result<Tensor> {
    let (b, t, d) = tokens.dims3()?;
    if plans.len() != b {
        return Err(Error::validation(format!(
            "{} mask plans for batch of {b}",
            plans.len()
        )));
    }
    if mask_token.dims1()? != d {
        return Err(Error::validation("mask token width differs from tokens"));
    }
    let mut m = vec![0f64; b * t];
    for (i, plan) in plans.iter().enumerate() {
        if plan.total != t {
            return Err(Error::validation(format!(
                "plan covers {} tokens, image has {t}",
                plan.total
            )));
        }
        for &pos in &plan.masked {
            m[i * t + pos] = 1.0;
        }
    }
    let mask = Tensor::from_vec(m, (b, t, 1), tokens.device())?.to_dtype(tokens.dtype())?;
    let keep = (1.0 - &mask)?;
    let filled = mask.broadcast_mul(&mask_token.reshape((1, 1, d))?)?;
    Ok((tokens.broadcast_mul(&keep)? + filled)?)
}

/// Multi-head cross-attention from tokens to a short latent sequence,
/// with a residual connection: `x + Wo·Attn(Wq·x, Wk·u, Wv·u)`.
pub struct CrossAttend {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    scale: f64,
}

impl CrossAttend {
    /// `dim` is the token width, `kv_dim` the latent width (they may
    /// differ — keys/values are projected into `dim`).
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::validation(format!(
                "dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: super::linear(params, &format!("{name}.q"), dim, dim, rng)?,
            wk: super::linear(params, &format!("{name}.k"), kv_dim, dim, rng)?,
            wv: super::linear(params, &format!("{name}.v"), kv_dim, dim, rng)?,
            wo: super::linear(params, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    /// `x: (B, T, dim)`, `latents: (B, L, kv_dim)` → `(B, T, dim)`.
    pub fn forward(&self, x: &Tensor, latents: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let (bl, l, _) = latents.dims3()?;
        if bl != b {
            return Err(Error::validation("token and latent batch sizes differ"));
        }
        let (h, dh) = (self.heads, d / self.heads);
        let split = |y: &Tensor, n: usize| -> Result<Tensor> {
            Ok(y.reshape((b, n, h, dh))?.permute([0, 2, 1, 3])?.contiguous()?)
        };
        let q = split(&self.wq.forward(x)?, t)?; // (B, h, T, dh)
        let k = split(&self.wk.forward(latents)?, l)?; // (B, h, L, dh)
        let v = split(&self.wv.forward(latents)?, l)?;
        let att = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?)? * self.scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att
            .matmul(&v)?
            .permute([0, 2, 1, 3])?
            .contiguous()?
            .reshape((b, t, d))?;
        Ok((x + self.wo.forward(&y)?)?)
    }
}

/// Per-token linear decoder from features back to patch pixels.
pub struct MimDecoder {
    proj: Linear,
    patch_h: usize,
    patch_w: usize,
    img_h: usize,
    img_w: usize,
}

impl MimDecoder {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        dim: usize,
        patch: (usize, usize),
        image: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (patch_h, patch_w) = patch;
        let (img_h, img_w) = image;
        if patch_h == 0
            || patch_w == 0
            || !img_h.is_multiple_of(patch_h)
            || !img_w.is_multiple_of(patch_w)
        {
            return Err(Error::validation(format!(
                "image {img_h}x{img_w} not divisible by patch {patch_h}x{patch_w}"
            )));
        }
        Ok(Self {
            proj: super::linear(params, &format!("{name}.proj"), dim, 3 * patch_h * patch_w, rng)?,
            patch_h,
            patch_w,
            img_h,
            img_w,
        })
    }

    /// `(B, T, dim)` tokens → `(B, 3, H, W)` pixels.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, t, _) = tokens.dims3()?;
        let grid = (self.img_h / self.patch_h) * (self.img_w / self.patch_w);
        if t != grid {
            return Err(Error::validation(format!(
                "{t} tokens do not fill a {grid}-patch grid"
            )));
        }
        let patches = self.proj.forward(tokens)?;
        unpatchify(&patches, self.patch_h, self.patch_w, self.img_h, self.img_w)
    }
}

/// Mean absolute error over the pixels of masked patches only.
///
/// `recon` and `target` are `(B, 3, H, W)`; `grid`/`patch` describe the
/// token geometry; `plans` marks which patches of each image were masked.
/// The mean divides by the number of masked pixel values. With nothing
/// masked the loss is exactly 0.
pub fn masked_l1(
    recon: &Tensor,
    target: &Tensor,
    plans: &[MaskPlan],
    grid: (usize, usize),
    patch: (usize, usize),
) -> Result<Tensor> {
    let (b, c, ih, iw) = recon.dims4()?;
    if recon.dims() != target.dims() {
        return Err(Error::validation("reconstruction and target shapes differ"));
    }
    let (gh, gw) = grid;
    let (ph, pw) = patch;
    if c != 3 || gh * ph != ih || gw * pw != iw {
        return Err(Error::validation(format!(
            "grid {gh}x{gw} of {ph}x{pw} patches does not tile a {ih}x{iw} image"
        )));
    }
    if plans.len() != b {
        return Err(Error::validation(format!(
            "{} mask plans for batch of {b}",
            plans.len()
        )));
    }
    let mut mask = vec![0f64; b * ih * iw];
    let mut n_masked_tokens = 0usize;
    for (i, plan) in plans.iter().enumerate() {
        if plan.total != gh * gw {
            return Err(Error::validation(format!(
                "plan covers {} tokens, grid has {}",
                plan.total,
                gh * gw
            )));
        }
        n_masked_tokens += plan.mask_count();
        for &pos in &plan.masked {
            let (r0, c0) = ((pos / gw) * ph, (pos % gw) * pw);
            for r in r0..r0 + ph {
                for cc in c0..c0 + pw {
                    mask[i * ih * iw + r * iw + cc] = 1.0;
                }
            }
        }
    }
    if n_masked_tokens == 0 {
        return Ok(Tensor::zeros((), recon.dtype(), recon.device())?);
    }
    let mask = Tensor::from_vec(mask, (b, 1, ih, iw), recon.device())?.to_dtype(recon.dtype())?;
    let diff = (recon - target)?.abs()?;
    let total = diff.broadcast_mul(&mask)?.sum_all()?;
    let n_values = (3 * ph * pw * n_masked_tokens) as f64;
    Ok(total.affine(1.0 / n_values, 0.0)?)
}
