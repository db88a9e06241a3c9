//! Corpus materialization: seeded sampling of render specs, PNG output,
//! and the `manifest.jsonl` index.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::render::{render_sample, RenderSpec, FONT_COUNT};
use crate::corpus::{validate_transcript, TextSample};
use crate::error::{Error, Result};
use crate::util::rng::{derive_seed, seeded_rng};
use crate::util::store::write_atomic;

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the dataset directory.
    pub path: String,
    pub transcript: String,
    /// `"train"` or `"val"`; every tenth sample goes to `"val"`.
    pub split: String,
}

/// Fewest CTC timesteps able to emit `text`: its length plus one mandatory
/// blank between each pair of equal adjacent characters.
pub fn min_ctc_timesteps(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let repeats = chars.windows(2).filter(|w| w[0] == w[1]).count();
    chars.len() + repeats
}

/// Validates a corpus word: charset membership, length 1..=10, and
/// emittability within the recognizer's 16 output columns.
fn validate_word(word: &str) -> Result<()> {
    validate_transcript(word)?;
    if word.chars().count() > 10 {
        return Err(Error::validation(format!(
            "word {word:?} is longer than 10 characters"
        )));
    }
    if min_ctc_timesteps(word) > 16 {
        return Err(Error::validation(format!(
            "word {word:?} needs {} CTC timesteps, recognizer emits 16",
            min_ctc_timesteps(word)
        )));
    }
    Ok(())
}

/// Built-in word list covering every charset character.
const DEFAULT_WORDS: &str = "\
the quick brown fox jumps over lazy dog pack my box with five dozen \
liquor jugs amazingly few quartz jewels vexed zephyr wolves night \
bright flock crazy monks vowing text scene read sign shop exit open \
close menu sale cafe hotel park street road stop slow fast word image \
pixel patch frame token index code book mask order learn train test \
probe super zoom blur sharp noise angle skew woven maze quiz jazz \
0 1 2 3 4 5 6 7 8 9 42 007 100 2048 365 999 1984 3141 8086 777 12345 \
90210 8675309 555 mp3 4x4 b2b 24h 3d x86 win95 area51 agent007 \
route66 catch22 f1 r2d2 c3po no1 top10 page404";

/// The built-in word list. Every word passes [`validate_word`] and every
/// charset character appears in at least one word.
pub fn default_wordlist() -> Vec<String> {
    DEFAULT_WORDS.split_whitespace().map(str::to_string).collect()
}

/// Loads a word list: UTF-8 text, one word per line, blank lines ignored.
pub fn load_wordlist(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let words: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    for w in &words {
        validate_word(w)?;
    }
    if words.is_empty() {
        return Err(Error::validation(format!(
            "wordlist {} has no words",
            path.display()
        )));
    }
    Ok(words)
}

/// Luma contrast between two RGB colors.
fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Draws the render spec for corpus sample `i`: seeded word, font, contrast-
/// checked color pair, and mild pixel noise.
fn sample_spec(wordlist: &[String], seed: u64, i: u64) -> RenderSpec {
    let mut rng = seeded_rng(seed, "corpus-sample", &[i]);
    let word = wordlist[rng.gen_range(0..wordlist.len())].clone();
    let font_id = rng.gen_range(0..FONT_COUNT);
    // Rejection-sample a legible color pair; fall back to black-on-white.
    let mut fg = [0.0, 0.0, 0.0];
    let mut bg = [1.0, 1.0, 1.0];
    for _ in 0..16 {
        let f: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..=1.0));
        let b: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..=1.0));
        if (luma(f) - luma(b)).abs() >= 0.35 {
            fg = f;
            bg = b;
            break;
        }
    }
    let noise_level = rng.gen_range(0.0..=0.02);
    RenderSpec {
        word,
        font_id,
        fg_color: fg,
        bg_color: bg,
        noise_level,
        geometry_seed: derive_seed(seed, "corpus-geometry", &[i]),
        noise_seed: derive_seed(seed, "corpus-noise", &[i]),
    }
}

/// Renders corpus sample `i` in memory, without touching disk. Used by
/// training loops that regenerate samples on the fly instead of reading the
/// materialized PNGs.
pub fn render_corpus_sample(wordlist: &[String], seed: u64, i: u64) -> Result<TextSample> {
    let mut sample = render_sample(&sample_spec(wordlist, seed, i))?;
    sample.sample_id = format!("{i:06}");
    Ok(sample)
}

/// Renders `count` samples into `out_dir` (`images/*.png` plus
/// `manifest.jsonl`) and returns the manifest. Rebuilding with the same
/// arguments reproduces every byte.
pub fn build_corpus(
    wordlist: &[String],
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    if wordlist.is_empty() {
        return Err(Error::validation("wordlist is empty"));
    }
    for w in wordlist {
        validate_word(w)?;
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let mut manifest = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let spec = sample_spec(wordlist, seed, i);
        let mut sample = render_sample(&spec)?;
        sample.sample_id = format!("{i:06}");
        let rel = format!("images/{}.png", sample.sample_id);
        sample.image.save_png(&out_dir.join(&rel))?;
        manifest.push(ManifestEntry {
            path: rel,
            transcript: sample.transcript,
            split: if i % 10 == 9 { "val" } else { "train" }.to_string(),
        });
    }

    let mut buf = Vec::new();
    for entry in &manifest {
        serde_json::to_writer(&mut buf, entry)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(&out_dir.join("manifest.jsonl"), &buf)?;
    Ok(manifest)
}

/// Reads `manifest.jsonl` back from a dataset directory.
pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("manifest line {}: {e}", n + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads one manifest entry's image as a [`TextSample`].
pub fn load_sample(dir: &Path, entry: &ManifestEntry) -> Result<TextSample> {
    let image = crate::util::image::Image::load_png(&dir.join(&entry.path))?;
    let sample_id = Path::new(&entry.path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(&entry.path)
        .to_string();
    let sample = TextSample {
        image,
        transcript: entry.transcript.clone(),
        sample_id,
    };
    sample.validate()?;
    Ok(sample)
}
