//! Vision-transformer encoder over non-overlapping image patches.
//!
//! Images are cut into a fixed patch grid (default 4×8-pixel patches, so a
//! 32×128 input becomes an 8×16 grid of 128 tokens), linearly embedded,
//! summed with a learned positional table, and passed through pre-norm
//! transformer blocks. The full token grid is returned — downstream heads
//! pool or attend over tokens as needed. Masking for the reconstruction
//! task happens between [`ViTEncoder::embed`] and
//! [`ViTEncoder::encode_embedded`], which is why those stages are public.

use candle_core::{D, Tensor};
use candle_nn::{Linear, Module};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tvqvae::patchify;
use crate::util::params::ParamStore;

/// Geometry and width settings for [`ViTEncoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Token width. Must be divisible by `heads`.
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of each block MLP, as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    /// Full-size backbone: 384-wide, 12 blocks, 6 heads on 4×8 patches.
    fn default() -> Self {
        Self {
            img_h: 32,
            img_w: 128,
            patch_h: 4,
            patch_w: 8,
            dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    /// Small preset that trains in minutes on one CPU core while keeping
    /// the same token grid as the full-size backbone.
    pub fn desk() -> Self {
        Self {
            dim: 96,
            depth: 3,
            heads: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_nonzero = [
            self.img_h,
            self.img_w,
            self.patch_h,
            self.patch_w,
            self.dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
        ]
        .iter()
        .all(|&v| v > 0);
        if !all_nonzero {
            return Err(Error::validation("all encoder dimensions must be nonzero"));
        }
        if !self.img_h.is_multiple_of(self.patch_h) || !self.img_w.is_multiple_of(self.patch_w) {
            return Err(Error::validation(format!(
                "image {}x{} not divisible by patch {}x{}",
                self.img_h, self.img_w, self.patch_h, self.patch_w
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::validation(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::validation("ln_eps must be positive"));
        }
        Ok(())
    }

    /// Token grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.img_h / self.patch_h, self.img_w / self.patch_w)
    }

    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_h * self.patch_w
    }
}

/// Layer normalization over the last dimension with learnable scale/shift.
///
/// Built from primitive ops rather than the fused `candle_nn` kernel, which
/// supports neither f64 nor backpropagation on CPU.
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: params.ones(&format!("{name}.weight"), &[dim])?,
            bias: params.zeros(&format!("{name}.bias"), &[dim])?,
            eps: 1e-6,
        })
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mu = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mu)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

/// Multi-head self-attention over the token axis.
struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
}

impl SelfAttention {
    fn new(
        params: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            qkv: super::linear(params, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            proj: super::linear(params, &format!("{name}.proj"), dim, dim, rng)?,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, t, 3, h, dh))?
            .permute([2, 0, 3, 1, 4])?; // (3, B, heads, T, dh)
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.transpose(D::Minus2, D::Minus1)?)? * self.scale)?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att
            .matmul(&v)?
            .permute([0, 2, 1, 3])?
            .contiguous()?
            .reshape((b, t, d))?;
        Ok(self.proj.forward(&y)?)
    }
}

/// Pre-norm transformer block: `x += attn(ln(x)); x += mlp(ln(x))`.
struct Block {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(
        params: &mut ParamStore,
        name: &str,
        cfg: &ViTConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = cfg.dim * cfg.mlp_ratio;
        Ok(Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), cfg.dim)?.with_eps(cfg.ln_eps),
            attn: SelfAttention::new(params, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), cfg.dim)?.with_eps(cfg.ln_eps),
            fc1: super::linear(params, &format!("{name}.fc1"), cfg.dim, hidden, rng)?,
            fc2: super::linear(params, &format!("{name}.fc2"), hidden, cfg.dim, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Patch-grid transformer encoder.
pub struct ViTEncoder {
    cfg: ViTConfig,
    embed: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

impl ViTEncoder {
    /// Registers all parameters in `params` under `prefix` and returns the
    /// assembled encoder. Initialization: Kaiming for linear weights, zero
    /// biases, N(0, 0.02) positional table, unit layer-norm scales.
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        cfg: &ViTConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = super::linear(
            params,
            &format!("{prefix}.embed"),
            cfg.patch_dim(),
            cfg.dim,
            rng,
        )?;
        let pos = params.normal(
            &format!("{prefix}.pos"),
            &[1, cfg.n_tokens(), cfg.dim],
            0.0,
            0.02,
            rng,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(params, &format!("{prefix}.block{i}"), cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln = LayerNorm::new(params, &format!("{prefix}.ln"), cfg.dim)?.with_eps(cfg.ln_eps);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            ln,
        })
    }

    pub fn cfg(&self) -> &ViTConfig {
        &self.cfg
    }

    /// Patch embedding only: `(B, 3, H, W)` → `(B, T, dim)` tokens, before
    /// the positional table is added. Masking hooks in after this stage.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.cfg.img_h || w != self.cfg.img_w {
            return Err(Error::validation(format!(
                "expected (B, 3, {}, {}) images, got ({c}, {h}, {w})",
                self.cfg.img_h, self.cfg.img_w
            )));
        }
        let patches = patchify(images, self.cfg.patch_h, self.cfg.patch_w)?;
        Ok(self.embed.forward(&patches)?)
    }

    /// Positional table, transformer blocks, and final layer norm:
    /// `(B, T, dim)` → `(B, T, dim)`.
    pub fn encode_embedded(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, t, d) = tokens.dims3()?;
        if t != self.cfg.n_tokens() || d != self.cfg.dim {
            return Err(Error::validation(format!(
                "expected (B, {}, {}) tokens, got (B, {t}, {d})",
                self.cfg.n_tokens(),
                self.cfg.dim
            )));
        }
        let mut x = tokens.broadcast_add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.ln.forward(&x)
    }

    /// Full encoder: `(B, 3, H, W)` → `(B, T, dim)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        self.encode_embedded(&self.embed(images)?)
    }
}
