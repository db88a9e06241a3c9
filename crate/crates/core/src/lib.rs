//! Self-supervised pretraining for scene-text images.
//!
//! The pipeline has three stages:
//!
//! 1. [`tvqvae`] trains a text-tailored vector-quantized autoencoder on
//!    rendered word images and freezes it into a [`codebook::TextKnowledgeCodebook`]
//!    that maps any 32x128 text image to eight discrete indices.
//! 2. [`trainer`] jointly optimizes three codebook-guided pretext tasks over a
//!    ViT encoder ([`pretext`]): frame-level contrastive discrimination with
//!    false-negative filtering, masked reconstruction with codebook
//!    cross-attention, and shuffled-portion rearrangement.
//! 3. [`downstream`] evaluates the pretrained encoder with a CTC recognizer
//!    probe and a lightweight super-resolution head.
//!
//! [`corpus`] renders the deterministic synthetic datasets all stages consume.

pub mod codebook;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod pretext;
pub mod trainer;
pub mod tvqvae;
pub mod util;

pub use error::{Error, Result};
