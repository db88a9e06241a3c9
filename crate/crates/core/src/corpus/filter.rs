//! Separable Gaussian filtering shared by augmentation and SR degradation.

use crate::util::image::Image;

/// Normalized 1-D Gaussian kernel with radius `ceil(3*sigma)`.
fn kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Gaussian blur with clamp-to-edge borders. `sigma <= 0` is the identity.
pub fn gaussian_blur(src: &Image, sigma: f32) -> Image {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (h, w) = (src.height(), src.width());

    // Horizontal pass into an unclamped intermediate buffer.
    let mut mid = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &wt) in k.iter().enumerate() {
                let sx = (x as i64 + t as i64 - radius).clamp(0, w as i64 - 1) as usize;
                let px = src.pixel(y, sx);
                for c in 0..3 {
                    acc[c] += wt * px[c];
                }
            }
            mid[(y * w + x) * 3..][..3].copy_from_slice(&acc);
        }
    }

    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (t, &wt) in k.iter().enumerate() {
                let sy = (y as i64 + t as i64 - radius).clamp(0, h as i64 - 1) as usize;
                let base = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * mid[base + c];
                }
            }
            out.set_pixel(y, x, acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let mut img = Image::filled(4, 6, 0.0);
        img.set(1, 2, 0, 0.9);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(8, 8, 0.4);
        let out = gaussian_blur(&img, 1.2);
        for &v in out.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_spreads_an_impulse_and_preserves_mass() {
        let mut img = Image::filled(9, 9, 0.0);
        img.set(4, 4, 0, 1.0);
        let out = gaussian_blur(&img, 1.0);
        // Center attenuated, neighbours lifted.
        assert!(out.get(4, 4, 0) < 1.0);
        assert!(out.get(4, 5, 0) > 0.0);
        // Away from borders the kernel is a partition of unity, so total
        // mass is preserved.
        let total: f32 = (0..9)
            .flat_map(|y| (0..9).map(move |x| (y, x)))
            .map(|(y, x)| out.get(y, x, 0))
            .sum();
        assert!((total - 1.0).abs() < 1e-5, "mass {total}");
    }
}
