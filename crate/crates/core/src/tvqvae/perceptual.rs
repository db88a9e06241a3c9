//! Fixed-weight convolutional feature extractor for the perceptual loss.
//!
//! A hermetic stand-in for a large pretrained network: three stride-2
//! convolutions with seeded He-initialized weights that are never trained.
//! Random convolutional features preserve enough structure that matching
//! them pulls reconstructions toward the target beyond per-pixel error.
//! The default seed is fixed so every model sees the same extractor and
//! losses stay comparable across runs.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::util::rng::seeded_rng;

/// Channel widths of the three conv layers.
const CHANNELS: [usize; 4] = [3, 8, 16, 16];

/// Seeded, frozen conv stack: 3x3 kernels, stride 2, padding 1, gelu after
/// every layer. A `(B, 3, H, W)` input yields `(B, 16, H/8, W/8)` features.
pub struct PerceptualNet {
    layers: Vec<(Tensor, Tensor)>,
    seed: u64,
}

impl PerceptualNet {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = seeded_rng(seed, "perceptual-init", &[]);
        let mut layers = Vec::new();
        for l in 0..CHANNELS.len() - 1 {
            let (cin, cout) = (CHANNELS[l], CHANNELS[l + 1]);
            let fan_in = (cin * 9) as f64;
            let std = (2.0 / fan_in).sqrt();
            let w_vals: Vec<f64> = (0..cout * cin * 9)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    std * z
                })
                .collect();
            let w = Tensor::from_vec(w_vals, (cout, cin, 3, 3), device)?.to_dtype(dtype)?;
            let b = Tensor::zeros((cout,), dtype, device)?;
            layers.push((w, b));
        }
        Ok(Self { layers, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feature map for a `(B, 3, H, W)` batch; H and W must be divisible
    /// by 8 so every stride-2 stage lands on a whole grid.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::validation(format!(
                "perceptual input must be (B, 3, 8k, 8k), got (? , {c}, {h}, {w})"
            )));
        }
        let mut x = images.clone();
        for (wt, bias) in &self.layers {
            let cout = wt.dims4()?.0;
            x = x
                .conv2d(wt, 1, 2, 1, 1)?
                .broadcast_add(&bias.reshape((1, cout, 1, 1))?)?
                .gelu()?;
        }
        Ok(x)
    }
}
