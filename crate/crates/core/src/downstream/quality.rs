//! Full-reference image quality metrics for the super-resolution head.
//!
//! Both metrics assume images in `[0, 1]` (peak signal 1.0) and accumulate
//! in float64 on the host so results are reproducible across runs and
//! platforms. PSNR is global; SSIM slides a uniform 8×8 window over every
//! valid position of each channel and averages the per-window scores.

use crate::error::{Error, Result};
use crate::util::image::Image;

/// SSIM window edge in pixels.
pub const SSIM_WINDOW: usize = 8;

/// SSIM stabilizers: `C1 = (k1·L)²`, `C2 = (k2·L)²` with `k1 = 0.01`,
/// `k2 = 0.03` and dynamic range `L = 1`.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::validation(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels: `10·log10(1 / MSE)` for unit
/// peak. Identical images have zero error, reported as `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.data().len();
    let sum_sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sum_sq / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Structural similarity, averaged over all valid 8×8 window positions of
/// all three channels. Window statistics use the biased (divide by 64)
/// variance. Scores lie in `[-1, 1]`; `ssim(a, a)` is exactly 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let npix = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0u64;
    for c in 0..3 {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let mut sa = 0.0;
                let mut sb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let va = a.get(y0 + dy, x0 + dx, c) as f64;
                        let vb = b.get(y0 + dy, x0 + dx, c) as f64;
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let ma = sa / npix;
                let mb = sb / npix;
                let var_a = saa / npix - ma * ma;
                let var_b = sbb / npix - mb * mb;
                let cov = sab / npix - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
                total += num / den;
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::util::rng::seeded_rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seeded_rng(seed, "quality-test", &[]);
        let data: Vec<f32> = (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        Image::from_vec(h, w, data).unwrap()
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let a = random_image(16, 24, 1);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_matches_hand_value_on_constant_offset() {
        // 0.75 - 0.25 = 0.5 exactly in float32, so MSE is exactly 0.25 and
        // PSNR is 10·log10(4).
        let a = Image::filled(10, 12, 0.25);
        let b = Image::filled(10, 12, 0.75);
        let got = psnr(&a, &b).unwrap();
        let want = 10.0 * 4.0f64.log10();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Image::filled(8, 8, 0.5);
        let b = Image::filled(8, 9, 0.5);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn metrics_are_symmetric() {
        let a = random_image(16, 16, 2);
        let b = random_image(16, 16, 3);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let a = random_image(12, 20, 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_matches_hand_expanded_single_window() {
        // An 8×8 image has exactly one window per channel; recompute the
        // statistics with two-pass centered sums, a formulation the
        // implementation does not use.
        let a = random_image(8, 8, 5);
        let b = random_image(8, 8, 6);
        let mut expected = 0.0;
        for c in 0..3 {
            let va: Vec<f64> = (0..64)
                .map(|i| a.get(i / 8, i % 8, c) as f64)
                .collect();
            let vb: Vec<f64> = (0..64)
                .map(|i| b.get(i / 8, i % 8, c) as f64)
                .collect();
            let ma = va.iter().sum::<f64>() / 64.0;
            let mb = vb.iter().sum::<f64>() / 64.0;
            let var_a = va.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / 64.0;
            let var_b = vb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / 64.0;
            let cov = va
                .iter()
                .zip(&vb)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / 64.0;
            expected += (2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)
                / ((ma * ma + mb * mb + 1e-4) * (var_a + var_b + 9e-4));
        }
        expected /= 3.0;
        let got = ssim(&a, &b).unwrap();
        let rel = (got - expected).abs() / expected.abs().max(1e-12);
        assert!(rel < 1e-8, "ssim {got} vs hand value {expected}");
    }

    #[test]
    fn ssim_stays_in_range_and_rejects_small_inputs() {
        for seed in 0..8 {
            let a = random_image(16, 32, 100 + seed);
            let b = random_image(16, 32, 200 + seed);
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s), "ssim {s} out of range");
        }
        let tiny = Image::filled(7, 7, 0.5);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn ssim_of_flat_bright_vs_dark_matches_closed_form() {
        // Constant images: variances and covariance vanish, leaving
        // C1-dominated luminance: (0 + C1)·C2 / ((0 + 1 + C1)·C2).
        let dark = Image::filled(8, 8, 0.0);
        let bright = Image::filled(8, 8, 1.0);
        let got = ssim(&dark, &bright).unwrap();
        let want = 1e-4 / (1.0 + 1e-4);
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }
}
