//! The frozen image tokenizer.
//!
//! Wraps a trained autoencoder as a read-only service: map an image to its
//! eight discrete indices, fetch the embedding row behind an index, and
//! answer "do these two slots share an index?" — the three queries the
//! pretext tasks need. The wrapper takes ownership and exposes no mutation,
//! so the underlying model cannot drift after loading; the content hash
//! taken at construction stays valid for its lifetime.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tvqvae::{quantize, Tvqvae};
use crate::util::image::Image;

mod tokens_file;
pub use tokens_file::{read_tokens_file, write_tokens_file};

/// Every image tokenizes to exactly this many slots.
pub const N_SLOTS: usize = 8;

/// The eight indices of one image, tagged with where they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub source_id: String,
    /// Indices into the codebook, left to right; each in `[0, N)`.
    pub indices: [u32; N_SLOTS],
}

/// Names one slot of one tokenized image, so equality queries don't need
/// the image or its tokens in hand.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SlotRef {
    pub source_id: String,
    /// Slot position, `0..8`.
    pub slot: usize,
}

impl SlotRef {
    pub fn new(source_id: impl Into<String>, slot: usize) -> Self {
        Self {
            source_id: source_id.into(),
            slot,
        }
    }
}

/// A frozen autoencoder acting as the tokenizer.
pub struct TextKnowledgeCodebook {
    model: Tvqvae,
    hash: String,
}

impl TextKnowledgeCodebook {
    /// Freezes an in-memory model.
    pub fn from_model(model: Tvqvae) -> Result<Self> {
        let hash = model.content_hash()?;
        Ok(Self { model, hash })
    }

    /// Loads and freezes a codebook file, verifying its digest.
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Self::from_model(Tvqvae::load(path, device)?)
    }

    /// Hash of the serialized model taken at construction. Because the
    /// wrapper never mutates, this identifies the codebook for its whole
    /// lifetime (checkpoints store it to detect mismatched tokenizers).
    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    pub fn n_codes(&self) -> usize {
        self.model.cfg().n_codes
    }

    pub fn dim(&self) -> usize {
        self.model.cfg().dim
    }

    pub fn cfg(&self) -> &crate::tvqvae::TvqvaeConfig {
        self.model.cfg()
    }

    /// The frozen `N x D` embedding table.
    pub fn embeddings(&self) -> &Tensor {
        self.model.embeddings()
    }

    /// Read access to the wrapped model (for reconstruction inspection).
    pub fn model(&self) -> &Tvqvae {
        &self.model
    }

    /// Tokenizes a batch `(B, 3, H, W)`; returns one sequence per image,
    /// tagged with the corresponding `source_ids` entry.
    pub fn tokenize_batch(
        &self,
        images: &Tensor,
        source_ids: &[String],
    ) -> Result<Vec<TokenSequence>> {
        let b = images.dims4()?.0;
        if b != source_ids.len() {
            return Err(Error::validation(format!(
                "{b} images but {} source ids",
                source_ids.len()
            )));
        }
        let x_c = self.model.encode(images)?;
        let quant = quantize(&x_c, self.model.embeddings())?;
        let (gh, gw) = self.model.cfg().grid();
        let per_image = gh * gw;
        let mut out = Vec::with_capacity(b);
        for (i, source_id) in source_ids.iter().enumerate() {
            let cells = &quant.z[i * per_image..(i + 1) * per_image];
            out.push(TokenSequence {
                source_id: source_id.clone(),
                indices: reduce_to_slots(cells, gh, gw)?,
            });
        }
        Ok(out)
    }

    /// Tokenizes one image.
    pub fn tokenize(&self, image: &Image, source_id: &str) -> Result<TokenSequence> {
        let batch = Image::batch_to_tensor(std::slice::from_ref(image), self.model.device())?
            .to_dtype(self.model.dtype())?;
        Ok(self
            .tokenize_batch(&batch, &[source_id.to_string()])?
            .pop()
            .expect("batch of one"))
    }

    /// Embedding rows for a token sequence: row `i` is exactly
    /// `embeddings[indices[i]]`. Shape `(8, D)`.
    pub fn retrieve_latents(&self, tokens: &TokenSequence) -> Result<Tensor> {
        self.retrieve_latents_batch(std::slice::from_ref(tokens))?
            .squeeze(0)
            .map_err(Into::into)
    }

    /// Embedding rows for many sequences at once. Shape `(B, 8, D)`.
    pub fn retrieve_latents_batch(&self, tokens: &[TokenSequence]) -> Result<Tensor> {
        let n = self.n_codes() as u32;
        let mut flat = Vec::with_capacity(tokens.len() * N_SLOTS);
        for seq in tokens {
            for &ix in &seq.indices {
                if ix >= n {
                    return Err(Error::validation(format!(
                        "index {ix} out of range for {n} codes (source {})",
                        seq.source_id
                    )));
                }
                flat.push(ix);
            }
        }
        let idx = Tensor::from_vec(flat, tokens.len() * N_SLOTS, self.model.device())?;
        Ok(self
            .embeddings()
            .index_select(&idx, 0)?
            .reshape((tokens.len(), N_SLOTS, self.dim()))?)
    }
}

/// Reduces a `gh x gw` grid of per-cell indices to the 8 slots.
///
/// The default 1x8 geometry passes through unchanged. Wider grids assign
/// each column band `gw/8` columns; every cell in a band votes and the
/// majority wins, ties going to the lowest index.
fn reduce_to_slots(cells: &[u32], gh: usize, gw: usize) -> Result<[u32; N_SLOTS]> {
    if cells.len() != gh * gw {
        return Err(Error::validation(format!(
            "expected {gh}x{gw} = {} cell indices, got {}",
            gh * gw,
            cells.len()
        )));
    }
    if !gw.is_multiple_of(N_SLOTS) {
        return Err(Error::config(format!(
            "grid width {gw} is not a multiple of {N_SLOTS} slots"
        )));
    }
    let band = gw / N_SLOTS;
    let mut out = [0u32; N_SLOTS];
    for (slot, value) in out.iter_mut().enumerate() {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for row in 0..gh {
            for col in slot * band..(slot + 1) * band {
                *votes.entry(cells[row * gw + col]).or_default() += 1;
            }
        }
        // BTreeMap iterates in ascending index order, so `>` implements
        // the lowest-index tie-break.
        let (mut best_ix, mut best_n) = (0u32, 0usize);
        for (ix, n) in votes {
            if n > best_n {
                best_ix = ix;
                best_n = n;
            }
        }
        *value = best_ix;
    }
    Ok(out)
}

/// Batch-scoped token lookup for the pretext tasks: tokenize once, answer
/// slot queries by id without touching the encoder again.
#[derive(Debug, Default, Clone)]
pub struct TokenCache {
    map: BTreeMap<String, TokenSequence>,
}

impl TokenCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tokenizes a whole batch into a fresh cache.
    pub fn build(
        codebook: &TextKnowledgeCodebook,
        images: &Tensor,
        source_ids: &[String],
    ) -> Result<Self> {
        let mut cache = Self::new();
        for seq in codebook.tokenize_batch(images, source_ids)? {
            cache.insert(seq)?;
        }
        Ok(cache)
    }

    /// Adds a sequence; duplicate ids must carry identical indices.
    pub fn insert(&mut self, seq: TokenSequence) -> Result<()> {
        if let Some(existing) = self.map.get(&seq.source_id) {
            if existing.indices != seq.indices {
                return Err(Error::validation(format!(
                    "conflicting token sequences for source {}",
                    seq.source_id
                )));
            }
            return Ok(());
        }
        self.map.insert(seq.source_id.clone(), seq);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, source_id: &str) -> Option<&TokenSequence> {
        self.map.get(source_id)
    }

    pub fn sequences(&self) -> impl Iterator<Item = &TokenSequence> {
        self.map.values()
    }

    /// The codebook index behind a slot reference.
    pub fn index_of(&self, slot: &SlotRef) -> Result<u32> {
        let seq = self.map.get(&slot.source_id).ok_or_else(|| {
            Error::validation(format!("source {} not in token cache", slot.source_id))
        })?;
        seq.indices
            .get(slot.slot)
            .copied()
            .ok_or_else(|| Error::validation(format!("slot {} out of range", slot.slot)))
    }

    /// True iff both slots carry the same codebook index.
    pub fn same_index(&self, a: &SlotRef, b: &SlotRef) -> Result<bool> {
        Ok(self.index_of(a)? == self.index_of(b)?)
    }
}
