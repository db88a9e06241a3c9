//! Image resampling: Catmull-Rom bicubic and 2x box downsampling.

use crate::util::image::Image;

/// Catmull-Rom cubic kernel (a = -0.5), support [-2, 2].
fn catmull_rom(t: f32) -> f32 {
    let t = t.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Precomputes, for each output coordinate, the four source taps and weights
/// along one axis. Source coordinates use pixel-center alignment
/// (`src = (dst + 0.5) * in / out - 0.5`) and clamp at the borders.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f32; 4])> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = (o as f32 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f32; 4];
            for k in 0..4 {
                let p = base as i64 + k as i64 - 1;
                idx[k] = p.clamp(0, in_len as i64 - 1) as usize;
                w[k] = catmull_rom(frac - (k as f32 - 1.0));
            }
            // Kernel weights sum to 1 analytically; renormalize to absorb
            // f32 rounding so flat regions stay exactly flat.
            let sum: f32 = w.iter().sum();
            for wk in &mut w {
                *wk /= sum;
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic (Catmull-Rom) resize to an arbitrary target size.
///
/// Separable: rows first, then columns, accumulating in `f32` and clamping
/// the final samples into `[0, 1]`.
pub fn resize_bicubic(src: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w) = (src.height(), src.width());
    let xtaps = axis_taps(w, out_w);
    let ytaps = axis_taps(h, out_h);

    // Horizontal pass: h rows, out_w columns. Intermediate values may
    // overshoot [0, 1]; keep them unclamped until the final pass.
    let mut mid = vec![0.0f32; h * out_w * 3];
    for y in 0..h {
        for (x, (idx, wts)) in xtaps.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for k in 0..4 {
                    acc += wts[k] * src.get(y, idx[k], c);
                }
                mid[(y * out_w + x) * 3 + c] = acc;
            }
        }
    }

    let mut out = Image::filled(out_h, out_w, 0.0);
    for (y, (idx, wts)) in ytaps.iter().enumerate() {
        for x in 0..out_w {
            let mut px = [0.0f32; 3];
            for k in 0..4 {
                let row = idx[k];
                let base = (row * out_w + x) * 3;
                for (c, v) in px.iter_mut().enumerate() {
                    *v += wts[k] * mid[base + c];
                }
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Exact 2x downsample: each output pixel is the mean of a 2x2 input block.
/// Input dimensions must be even.
pub fn downsample_2x(src: &Image) -> Image {
    let (h, w) = (src.height(), src.width());
    assert!(h % 2 == 0 && w % 2 == 0, "downsample_2x needs even dims");
    let mut out = Image::filled(h / 2, w / 2, 0.0);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let mut px = [0.0f32; 3];
            for dy in 0..2 {
                for dx in 0..2 {
                    let s = src.pixel(2 * y + dy, 2 * x + dx);
                    for c in 0..3 {
                        px[c] += s[c];
                    }
                }
            }
            for v in &mut px {
                *v *= 0.25;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}
