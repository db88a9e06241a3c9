//! Deterministic synthetic scene-text data: rendering, augmentation,
//! super-resolution degradation, and on-disk dataset materialization.
//!
//! Every operation here is a pure function of its inputs and an explicit
//! seed; rebuilding a corpus with the same arguments reproduces it byte for
//! byte. Images are 32x128 RGB in `[0, 1]` (see [`crate::util::Image`]).

mod augment;
mod dataset;
mod filter;
mod render;
mod sr;

pub use augment::{augment, make_view_pair, AugmentationKind, AugmentationPolicy, ViewPair};
pub use dataset::{
    build_corpus, default_wordlist, load_manifest, load_sample, load_wordlist, min_ctc_timesteps,
    render_corpus_sample, ManifestEntry,
};
pub use filter::gaussian_blur;
pub use render::{render_sample, RenderSpec, FONT_COUNT};
pub use sr::{make_sr_pair, SrDegradation, SrPair};

use crate::error::{Error, Result};
use crate::util::Image;

/// Target image height in pixels.
pub const IMG_H: usize = 32;
/// Target image width in pixels.
pub const IMG_W: usize = 128;

/// Recognition alphabet: lowercase letters then digits, 36 classes.
/// Transcripts are case-folded to this set before validation.
pub const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Number of classes in [`CHARSET`].
pub const CHARSET_LEN: usize = 36;

/// Maps a charset character to its class id in `[0, 36)`.
pub fn char_class(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        _ => None,
    }
}

/// Class id back to its charset character.
pub fn class_char(class: usize) -> Option<char> {
    CHARSET.chars().nth(class)
}

/// Checks that a transcript is non-empty and entirely within the charset.
pub fn validate_transcript(text: &str) -> Result<()> {
    if text.is_empty() {
        return Err(Error::validation("transcript is empty"));
    }
    for c in text.chars() {
        if char_class(c).is_none() {
            return Err(Error::validation(format!(
                "transcript {text:?} contains {c:?}, outside charset [a-z0-9]"
            )));
        }
    }
    Ok(())
}

/// A rendered text image with its transcript — the atomic dataset unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    /// 32x128 RGB image in `[0, 1]`.
    pub image: Image,
    /// Ground-truth text, all characters in [`CHARSET`].
    pub transcript: String,
    /// Unique identifier within one corpus.
    pub sample_id: String,
}

impl TextSample {
    /// Validates shape, range (enforced by [`Image`]), and transcript.
    pub fn validate(&self) -> Result<()> {
        if self.image.height() != IMG_H || self.image.width() != IMG_W {
            return Err(Error::validation(format!(
                "sample {} image is {}x{}, expected {IMG_H}x{IMG_W}",
                self.sample_id,
                self.image.height(),
                self.image.width()
            )));
        }
        validate_transcript(&self.transcript)
    }
}
