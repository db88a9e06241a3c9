//! The seven-item augmentation menu and two-view generation.
//!
//! Magnitude ranges are fixed, documented defaults (the menu itself is the
//! contract; strengths were chosen so text stays legible at 32x128):
//!
//! | augmentation       | parameters drawn per application              |
//! |--------------------|-----------------------------------------------|
//! | contrast           | factor in [0.5, 1.5] around mid-grey          |
//! | blur               | Gaussian sigma in [0.4, 1.2]                  |
//! | sharpen            | unsharp amount in [0.5, 1.5], sigma 1.0       |
//! | crop               | kept sub-rectangle 70-100% per axis, rest     |
//! |                    | filled with the image mean color              |
//! | gray               | Rec. 601 luma on all channels                 |
//! | color-jitter       | per-channel gain [0.8, 1.2], bias ±0.08       |
//! | perspective/affine | rotation ±4°, shear ±0.12, scale [0.92,1.08], |
//! |                    | translation ±2px, perspective ±0.0015         |

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::filter::gaussian_blur;
use crate::util::image::Image;
use crate::util::rng::seeded_rng;

/// One entry of the augmentation menu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentationKind {
    Contrast,
    Blur,
    Sharpen,
    Crop,
    Gray,
    ColorJitter,
    /// Combined affine + mild perspective warp.
    PerspectiveAffine,
}

/// All seven menu items in canonical order.
pub const FULL_MENU: [AugmentationKind; 7] = [
    AugmentationKind::Contrast,
    AugmentationKind::Blur,
    AugmentationKind::Sharpen,
    AugmentationKind::Crop,
    AugmentationKind::Gray,
    AugmentationKind::ColorJitter,
    AugmentationKind::PerspectiveAffine,
];

/// Which augmentations may be drawn and how many are applied per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Ordered menu to draw from.
    pub menu: Vec<AugmentationKind>,
    /// Number of distinct menu items applied per view.
    pub picks_per_view: usize,
    /// Policy-level seed, mixed with the per-call seed.
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    /// Full seven-item menu, three picks per view.
    fn default() -> Self {
        Self {
            menu: FULL_MENU.to_vec(),
            picks_per_view: 3,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// An identity policy (no augmentations applied).
    pub fn identity() -> Self {
        Self {
            menu: FULL_MENU.to_vec(),
            picks_per_view: 0,
            seed: 0,
        }
    }
}

/// Two augmented views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Image,
    pub view_b: Image,
    pub source_id: String,
}

/// Menu items that `augment` will apply for this `(policy, seed)`, in
/// application order. Exposed so selection statistics can be audited
/// without diffing pixels.
pub fn selected_kinds(policy: &AugmentationPolicy, seed: u64) -> Vec<AugmentationKind> {
    let mut rng = seeded_rng(policy.seed, "augment-menu", &[seed]);
    let k = policy.picks_per_view.min(policy.menu.len());
    sample(&mut rng, policy.menu.len(), k)
        .into_iter()
        .map(|i| policy.menu[i])
        .collect()
}

/// Applies `picks_per_view` distinct menu augmentations, deterministically
/// for a given `(policy, seed)`. Output keeps the input shape and `[0, 1]`
/// range.
pub fn augment(image: &Image, policy: &AugmentationPolicy, seed: u64) -> Image {
    let kinds = selected_kinds(policy, seed);
    let mut rng = seeded_rng(policy.seed, "augment-params", &[seed]);
    let mut out = image.clone();
    for kind in kinds {
        out = apply_one(&out, kind, &mut rng);
    }
    out
}

/// Builds two views of `image` from independent sub-seeds.
pub fn make_view_pair(
    image: &Image,
    source_id: &str,
    policy: &AugmentationPolicy,
    seed: u64,
) -> ViewPair {
    ViewPair {
        view_a: augment(image, policy, seed.wrapping_mul(2)),
        view_b: augment(image, policy, seed.wrapping_mul(2).wrapping_add(1)),
        source_id: source_id.to_string(),
    }
}

fn apply_one(img: &Image, kind: AugmentationKind, rng: &mut ChaCha8Rng) -> Image {
    match kind {
        AugmentationKind::Contrast => contrast(img, rng.gen_range(0.5..=1.5)),
        AugmentationKind::Blur => gaussian_blur(img, rng.gen_range(0.4..=1.2)),
        AugmentationKind::Sharpen => sharpen(img, rng.gen_range(0.5..=1.5)),
        AugmentationKind::Crop => crop(img, rng),
        AugmentationKind::Gray => gray(img),
        AugmentationKind::ColorJitter => color_jitter(img, rng),
        AugmentationKind::PerspectiveAffine => warp(img, rng),
    }
}

fn map_pixels(img: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut out = Image::filled(img.height(), img.width(), 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set_pixel(y, x, f(img.pixel(y, x)));
        }
    }
    out
}

fn contrast(img: &Image, factor: f32) -> Image {
    map_pixels(img, |p| p.map(|v| 0.5 + (v - 0.5) * factor))
}

fn sharpen(img: &Image, amount: f32) -> Image {
    let soft = gaussian_blur(img, 1.0);
    let mut out = Image::filled(img.height(), img.width(), 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            let s = soft.pixel(y, x);
            out.set_pixel(
                y,
                x,
                [
                    p[0] + amount * (p[0] - s[0]),
                    p[1] + amount * (p[1] - s[1]),
                    p[2] + amount * (p[2] - s[2]),
                ],
            );
        }
    }
    out
}

/// Keeps a random 70-100% sub-rectangle in place and fills the remainder
/// with the image mean color, so the output stays 32x128.
fn crop(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let kh = ((h as f32) * rng.gen_range(0.7..=1.0)).round().max(1.0) as usize;
    let kw = ((w as f32) * rng.gen_range(0.7..=1.0)).round().max(1.0) as usize;
    let y0 = rng.gen_range(0..=h - kh);
    let x0 = rng.gen_range(0..=w - kw);
    let fill = img.channel_means();
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let inside = y >= y0 && y < y0 + kh && x >= x0 && x < x0 + kw;
            out.set_pixel(y, x, if inside { img.pixel(y, x) } else { fill });
        }
    }
    out
}

fn gray(img: &Image) -> Image {
    map_pixels(img, |p| {
        let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        [l, l, l]
    })
}

fn color_jitter(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    let gain: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.8..=1.2));
    let bias: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..=0.08));
    map_pixels(img, |p| {
        [
            p[0] * gain[0] + bias[0],
            p[1] * gain[1] + bias[1],
            p[2] * gain[2] + bias[2],
        ]
    })
}

/// Inverts a 3x3 homography (row-major).
fn invert3(m: [f32; 9]) -> [f32; 9] {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    let d = 1.0 / det;
    [
        (m[4] * m[8] - m[5] * m[7]) * d,
        (m[2] * m[7] - m[1] * m[8]) * d,
        (m[1] * m[5] - m[2] * m[4]) * d,
        (m[5] * m[6] - m[3] * m[8]) * d,
        (m[0] * m[8] - m[2] * m[6]) * d,
        (m[2] * m[3] - m[0] * m[5]) * d,
        (m[3] * m[7] - m[4] * m[6]) * d,
        (m[1] * m[6] - m[0] * m[7]) * d,
        (m[0] * m[4] - m[1] * m[3]) * d,
    ]
}

fn matmul3(a: [f32; 9], b: [f32; 9]) -> [f32; 9] {
    let mut out = [0.0f32; 9];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
            }
        }
    }
    out
}

/// Bilinear sample with clamp-to-edge borders.
fn bilinear(img: &Image, fx: f32, fy: f32) -> [f32; 3] {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let gx = |xi: i64| xi.clamp(0, w - 1) as usize;
    let gy = |yi: i64| yi.clamp(0, h - 1) as usize;
    let (x0i, y0i) = (x0 as i64, y0 as i64);
    let p00 = img.pixel(gy(y0i), gx(x0i));
    let p01 = img.pixel(gy(y0i), gx(x0i + 1));
    let p10 = img.pixel(gy(y0i + 1), gx(x0i));
    let p11 = img.pixel(gy(y0i + 1), gx(x0i + 1));
    std::array::from_fn(|c| {
        let top = p00[c] + tx * (p01[c] - p00[c]);
        let bot = p10[c] + tx * (p11[c] - p10[c]);
        top + ty * (bot - top)
    })
}

/// Small affine + perspective warp about the image center, inverse-mapped
/// with bilinear sampling and clamp-to-edge borders.
fn warp(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (img.height() as f32, img.width() as f32);
    let theta: f32 = rng.gen_range(-4.0f32..=4.0).to_radians();
    let shear: f32 = rng.gen_range(-0.12..=0.12);
    let scale: f32 = rng.gen_range(0.92..=1.08);
    let tx: f32 = rng.gen_range(-2.0..=2.0);
    let ty: f32 = rng.gen_range(-2.0..=2.0);
    let p1: f32 = rng.gen_range(-0.0015..=0.0015);
    let p2: f32 = rng.gen_range(-0.0015..=0.0015);

    let (sin, cos) = theta.sin_cos();
    let affine = [
        scale * cos,
        scale * (shear - sin),
        tx,
        scale * sin,
        scale * (shear * sin + cos),
        ty,
        0.0,
        0.0,
        1.0,
    ];
    let persp = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, p1, p2, 1.0];
    let (cx, cy) = (w / 2.0, h / 2.0);
    let to_center = [1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0];
    let from_center = [1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0];
    let fwd = matmul3(from_center, matmul3(affine, matmul3(persp, to_center)));
    let inv = invert3(fwd);

    let mut out = Image::filled(img.height(), img.width(), 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (xf, yf) = (x as f32 + 0.5, y as f32 + 0.5);
            let sw = inv[6] * xf + inv[7] * yf + inv[8];
            let sx = (inv[0] * xf + inv[1] * yf + inv[2]) / sw - 0.5;
            let sy = (inv[3] * xf + inv[4] * yf + inv[5]) / sw - 0.5;
            out.set_pixel(y, x, bilinear(img, sx, sy));
        }
    }
    out
}
