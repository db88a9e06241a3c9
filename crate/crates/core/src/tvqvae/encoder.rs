//! Per-patch encoder/decoder stacks and instance normalization.
//!
//! The encoder maps each flattened patch through a shared linear projection
//! followed by residual MLP blocks, so the feature at grid cell `(i, j)`
//! depends only on the pixels of patch `(i, j)`. Instance normalization
//! then standardizes each feature channel over the grid positions of one
//! image, removing per-image style statistics while keeping content.

use candle_core::{Module, Tensor};
use candle_nn::Linear;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::util::params::ParamStore;

/// Builds a `Linear` whose weight/bias live in `params` under `name`.
pub(crate) fn linear(
    params: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Linear> {
    let w = params.kaiming(&format!("{name}.weight"), &[out_dim, in_dim], rng)?;
    let b = params.zeros(&format!("{name}.bias"), &[out_dim])?;
    Ok(Linear::new(w, Some(b)))
}

/// `x + W2·gelu(W1·x)` with both layers at the block width.
pub(crate) struct ResidualBlock {
    fc1: Linear,
    fc2: Linear,
}

impl ResidualBlock {
    pub fn new(params: &mut ParamStore, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: linear(params, &format!("{name}.fc1"), width, width, rng)?,
            fc2: linear(params, &format!("{name}.fc2"), width, width, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.fc2.forward(&self.fc1.forward(x)?.gelu()?)?;
        Ok((x + h)?)
    }
}

/// Shared-weight per-patch MLP: input projection, residual blocks, output
/// projection. Used as both the T-Encoder (patch pixels → feature) and the
/// decoder (quantized feature → patch pixels).
pub struct PatchMlp {
    input: Linear,
    blocks: Vec<ResidualBlock>,
    output: Linear,
}

impl PatchMlp {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        n_blocks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let input = linear(params, &format!("{name}.input"), in_dim, hidden, rng)?;
        let blocks = (0..n_blocks)
            .map(|i| ResidualBlock::new(params, &format!("{name}.block{i}"), hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let output = linear(params, &format!("{name}.output"), hidden, out_dim, rng)?;
        Ok(Self {
            input,
            blocks,
            output,
        })
    }

    /// `(B, P, in_dim)` → `(B, P, out_dim)`, rows independent.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.input.forward(x)?.gelu()?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(self.output.forward(&h)?)
    }
}

/// Instance normalization over grid positions: for each image and feature
/// channel, `(x − µ) / sqrt(σ² + eps)` with population statistics computed
/// across the `P` positions of that image.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mu = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mu)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}
