//! Deterministic word-image rendering over a small set of bundled fonts.

use std::sync::OnceLock;

use ab_glyph::{point, Font, FontRef, Glyph, GlyphId, PxScale, ScaleFont};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{validate_transcript, TextSample, IMG_H, IMG_W};
use crate::error::{Error, Result};
use crate::util::image::Image;
use crate::util::rng::seeded_rng;

/// Bundled open-license fonts (DejaVu family), addressed by `font_id`.
static FONT_BYTES: [&[u8]; 4] = [
    include_bytes!("../../assets/fonts/DejaVuSans.ttf"),
    include_bytes!("../../assets/fonts/DejaVuSans-Bold.ttf"),
    include_bytes!("../../assets/fonts/DejaVuSerif.ttf"),
    include_bytes!("../../assets/fonts/DejaVuSansMono.ttf"),
];

/// Number of bundled fonts.
pub const FONT_COUNT: usize = 4;

fn fonts() -> &'static Vec<FontRef<'static>> {
    static FONTS: OnceLock<Vec<FontRef<'static>>> = OnceLock::new();
    FONTS.get_or_init(|| {
        FONT_BYTES
            .iter()
            .map(|b| FontRef::try_from_slice(b).expect("bundled font parses"))
            .collect()
    })
}

/// Full description of one rendered sample. Identical specs render
/// bit-identical images.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    /// Word to draw, 1..=10 charset characters.
    pub word: String,
    /// Index into the bundled font set, `[0, FONT_COUNT)`.
    pub font_id: usize,
    /// Text color, RGB in `[0, 1]`.
    pub fg_color: [f32; 3],
    /// Background color, RGB in `[0, 1]`.
    pub bg_color: [f32; 3],
    /// Standard deviation of additive Gaussian pixel noise; 0 disables it.
    pub noise_level: f32,
    /// Drives text scale and placement jitter.
    pub geometry_seed: u64,
    /// Drives the noise draw, independently of geometry.
    pub noise_seed: u64,
}

impl RenderSpec {
    fn validate(&self) -> Result<()> {
        validate_transcript(&self.word)?;
        let len = self.word.chars().count();
        if len > 10 {
            return Err(Error::validation(format!(
                "word {:?} has {len} characters, maximum is 10",
                self.word
            )));
        }
        if self.font_id >= FONT_COUNT {
            return Err(Error::config(format!(
                "font_id {} out of range (have {FONT_COUNT} fonts)",
                self.font_id
            )));
        }
        for &v in self.fg_color.iter().chain(self.bg_color.iter()) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("color component {v} outside [0,1]")));
            }
        }
        if self.noise_level.is_nan() || self.noise_level < 0.0 {
            return Err(Error::validation(format!(
                "noise_level {} must be >= 0",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Lays the word out at `scale`, returning positioned glyphs and the caret
/// advance width (kerning included).
fn layout(font: &FontRef<'_>, word: &str, scale: f32) -> (Vec<Glyph>, f32) {
    let scaled = font.as_scaled(PxScale::from(scale));
    let mut glyphs = Vec::with_capacity(word.len());
    let mut caret = 0.0f32;
    let mut prev: Option<GlyphId> = None;
    for c in word.chars() {
        let mut glyph = scaled.scaled_glyph(c);
        if let Some(p) = prev {
            caret += scaled.kern(p, glyph.id);
        }
        glyph.position = point(caret, 0.0);
        caret += scaled.h_advance(glyph.id);
        prev = Some(glyph.id);
        glyphs.push(glyph);
    }
    (glyphs, caret)
}

/// Union of outlined-ink pixel bounds over all glyphs.
fn ink_bounds(font: &FontRef<'_>, glyphs: &[Glyph]) -> Option<(f32, f32, f32, f32)> {
    let mut b: Option<(f32, f32, f32, f32)> = None;
    for g in glyphs {
        if let Some(og) = font.outline_glyph(g.clone()) {
            let r = og.px_bounds();
            b = Some(match b {
                None => (r.min.x, r.min.y, r.max.x, r.max.y),
                Some((x0, y0, x1, y1)) => (
                    x0.min(r.min.x),
                    y0.min(r.min.y),
                    x1.max(r.max.x),
                    y1.max(r.max.y),
                ),
            });
        }
    }
    b
}

/// Renders a word into a 32x128 image: scale-to-fit with seeded size and
/// placement jitter, coverage-blended glyphs, then optional Gaussian noise.
pub fn render_sample(spec: &RenderSpec) -> Result<TextSample> {
    spec.validate()?;
    let font = &fonts()[spec.font_id];
    for c in spec.word.chars() {
        if font.glyph_id(c).0 == 0 {
            return Err(Error::config(format!(
                "font {} has no glyph for {c:?}",
                spec.font_id
            )));
        }
    }
    let mut rng = seeded_rng(spec.geometry_seed, "render-geometry", &[]);

    // Fit: measure at a reference scale, then solve for the scale that hits
    // a seeded fraction of the frame, capped by both axes.
    const REF: f32 = 32.0;
    let (_, ref_width) = layout(font, &spec.word, REF);
    let scaled_ref = font.as_scaled(PxScale::from(REF));
    let ref_height = scaled_ref.ascent() - scaled_ref.descent();
    let target_w = (IMG_W as f32 - 8.0) * rng.gen_range(0.75..=1.0);
    let target_h = (IMG_H as f32 - 6.0) * rng.gen_range(0.70..=1.0);
    let scale = REF * (target_w / ref_width).min(target_h / ref_height);

    let (glyphs, _) = layout(font, &spec.word, scale);
    let Some((x0, y0, x1, y1)) = ink_bounds(font, &glyphs) else {
        return Err(Error::validation(format!(
            "word {:?} produced no ink",
            spec.word
        )));
    };

    // Shift the ink box to a seeded position fully inside a 1px margin.
    let ink_w = x1 - x0;
    let ink_h = y1 - y0;
    let max_dx = (IMG_W as f32 - 2.0 - ink_w).max(0.0);
    let max_dy = (IMG_H as f32 - 2.0 - ink_h).max(0.0);
    let dx = 1.0 - x0 + rng.gen_range(0.0..=1.0) * max_dx;
    let dy = 1.0 - y0 + rng.gen_range(0.0..=1.0) * max_dy;

    let mut image = Image::filled(IMG_H, IMG_W, 0.0);
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            image.set_pixel(y, x, spec.bg_color);
        }
    }
    for g in &glyphs {
        let mut g = g.clone();
        g.position = point(g.position.x + dx, g.position.y + dy);
        if let Some(og) = font.outline_glyph(g) {
            let b = og.px_bounds();
            og.draw(|gx, gy, cov| {
                let px = b.min.x as i64 + gx as i64;
                let py = b.min.y as i64 + gy as i64;
                if px >= 0 && py >= 0 && (px as usize) < IMG_W && (py as usize) < IMG_H {
                    let cov = cov.clamp(0.0, 1.0);
                    let (x, y) = (px as usize, py as usize);
                    let cur = image.pixel(y, x);
                    image.set_pixel(
                        y,
                        x,
                        [
                            cur[0] + cov * (spec.fg_color[0] - cur[0]),
                            cur[1] + cov * (spec.fg_color[1] - cur[1]),
                            cur[2] + cov * (spec.fg_color[2] - cur[2]),
                        ],
                    );
                }
            });
        }
    }

    if spec.noise_level > 0.0 {
        let mut nrng = seeded_rng(spec.noise_seed, "render-noise", &[]);
        for v in image.data_mut() {
            let n: f32 = nrng.sample(StandardNormal);
            *v = (*v + spec.noise_level * n).clamp(0.0, 1.0);
        }
    }

    Ok(TextSample {
        image,
        transcript: spec.word.clone(),
        sample_id: String::new(),
    })
}
