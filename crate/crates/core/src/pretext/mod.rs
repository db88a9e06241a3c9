//! Self-supervised pretext tasks driven by the frozen codebook.
//!
//! Three tasks share one [`ViTEncoder`] backbone:
//!
//! * **Contrastive** ([`contrast`]): images are pooled into eight
//!   column-band frames; frames whose codebook index matches the anchor's
//!   are never used as negatives, and one of them may substitute for the
//!   standard positive.
//! * **Masked reconstruction** ([`masked`]): a fixed fraction of patch
//!   tokens is replaced by a learned mask token; a cross-attention block
//!   over the image's eight codebook latents guides reconstruction, scored
//!   by L1 on masked pixels only.
//! * **Rearrangement** ([`rearrange`]): vertical strips are shuffled and a
//!   Mixer head predicts the original order, scored by the minimum
//!   cross-entropy over all orderings consistent with the strips' codebook
//!   indices.

mod contrast;
mod masked;
mod rearrange;
mod vit;

pub(crate) use crate::tvqvae::linear;

pub use contrast::{
    ema_update, filter_negatives, info_nce, instance_map, l2_normalize, plan_sid_batch,
    select_positive, sid_loss, AnchorPlan, MlpHead, SidOutcome,
};
pub use masked::{
    apply_mask, make_mask_plan, masked_l1, CrossAttend, MaskPlan, MimDecoder,
};
pub use rearrange::{
    make_permutation, rtr_loss, shuffle_strips, valid_orders, valid_orders_capped, MixerRankHead,
    VALID_ORDER_CAP,
};
pub use vit::{LayerNorm, ViTConfig, ViTEncoder};
