//! Low/high-resolution pair synthesis for super-resolution training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::filter::gaussian_blur;
use crate::corpus::{TextSample, IMG_H, IMG_W};
use crate::error::{Error, Result};
use crate::util::image::Image;
use crate::util::resize::downsample_2x;
use crate::util::rng::seeded_rng;

/// Degradation model mapping a 32x128 image to its 16x64 counterpart:
/// Gaussian blur, exact 2x box downsample, additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrDegradation {
    /// Blur sigma is drawn uniformly from this inclusive range.
    pub blur_sigma: (f32, f32),
    /// Standard deviation of the additive noise on the downsampled image.
    pub noise_sigma: f32,
}

impl Default for SrDegradation {
    fn default() -> Self {
        Self {
            blur_sigma: (0.5, 1.5),
            noise_sigma: 0.02,
        }
    }
}

impl SrDegradation {
    /// No blur, no noise: the LR image is exactly the 2x average pool of HR.
    pub fn identity() -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            noise_sigma: 0.0,
        }
    }
}

/// One aligned low/high-resolution training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SrPair {
    /// 16x64 degraded image.
    pub lr: Image,
    /// 32x128 ground truth.
    pub hr: Image,
    pub source_id: String,
}

/// Degrades a sample into an [`SrPair`], deterministically for a given seed.
pub fn make_sr_pair(sample: &TextSample, degradation: &SrDegradation, seed: u64) -> Result<SrPair> {
    if sample.image.height() != IMG_H || sample.image.width() != IMG_W {
        return Err(Error::validation(format!(
            "SR source must be {IMG_H}x{IMG_W}, got {}x{}",
            sample.image.height(),
            sample.image.width()
        )));
    }
    let (lo, hi) = degradation.blur_sigma;
    if !(0.0..=8.0).contains(&lo) || hi < lo {
        return Err(Error::config(format!(
            "blur sigma range ({lo}, {hi}) is not an ordered range in [0, 8]"
        )));
    }
    let mut rng = seeded_rng(seed, "sr-degrade", &[]);
    let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let blurred = gaussian_blur(&sample.image, sigma);
    let mut lr = downsample_2x(&blurred);
    if degradation.noise_sigma > 0.0 {
        for v in lr.data_mut() {
            let n: f32 = rng.sample(StandardNormal);
            *v = (*v + degradation.noise_sigma * n).clamp(0.0, 1.0);
        }
    }
    Ok(SrPair {
        lr,
        hr: sample.image.clone(),
        source_id: sample.sample_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::render::{render_sample, RenderSpec};

    fn sample() -> TextSample {
        let mut s = render_sample(&RenderSpec {
            word: "zoom10".to_string(),
            font_id: 2,
            fg_color: [0.1, 0.1, 0.1],
            bg_color: [0.95, 0.9, 0.8],
            noise_level: 0.0,
            geometry_seed: 3,
            noise_seed: 0,
        })
        .unwrap();
        s.sample_id = "zoom10".to_string();
        s
    }

    #[test]
    fn identity_degradation_equals_average_pool() {
        let s = sample();
        let pair = make_sr_pair(&s, &SrDegradation::identity(), 1).unwrap();
        let pooled = downsample_2x(&s.image);
        assert_eq!(pair.lr, pooled);
        assert_eq!(pair.hr, s.image);
    }

    #[test]
    fn shapes_are_16_by_64_and_32_by_128() {
        let pair = make_sr_pair(&sample(), &SrDegradation::default(), 1).unwrap();
        assert_eq!((pair.lr.height(), pair.lr.width()), (16, 64));
        assert_eq!((pair.hr.height(), pair.hr.width()), (32, 128));
    }

    #[test]
    fn degradation_is_deterministic_per_seed() {
        let s = sample();
        let d = SrDegradation::default();
        assert_eq!(make_sr_pair(&s, &d, 7).unwrap(), make_sr_pair(&s, &d, 7).unwrap());
        assert_ne!(
            make_sr_pair(&s, &d, 7).unwrap().lr,
            make_sr_pair(&s, &d, 8).unwrap().lr
        );
    }

    #[test]
    fn bad_sigma_range_is_a_config_error() {
        let d = SrDegradation {
            blur_sigma: (2.0, 1.0),
            noise_sigma: 0.0,
        };
        assert!(make_sr_pair(&sample(), &d, 1).is_err());
    }
}
