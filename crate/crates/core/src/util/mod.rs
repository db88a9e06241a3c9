//! Shared plumbing: seed derivation, image buffers, resampling, tensor files.

pub mod fd;
pub mod image;
pub mod optim;
pub mod params;
pub mod resize;
pub mod rng;
pub mod store;

pub use image::Image;
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use rng::{derive_seed, seeded_rng};
