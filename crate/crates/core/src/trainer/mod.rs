//! Joint optimization of the three pretext tasks: one shared encoder and
//! its task heads trained with a single AdamW over a warmup-plus-cosine
//! schedule, a momentum branch maintained by EMA, per-step metrics logging,
//! and atomic checkpoints supporting bit-exact resume.
//!
//! The per-step total is `L_c + alpha*L_m + beta*L_r` — contrastive,
//! masked-reconstruction, and rearrangement. The contrastive task runs on
//! two augmented views of each image; the other two see the un-augmented
//! image. The codebook stays frozen throughout: its hash is recorded in
//! every checkpoint and re-verified when a run finishes or resumes.

mod config;
mod model;
mod pretrain;

pub use config::{
    combine_losses, lr_schedule, LossBundle, MetricsRecord, PretrainConfig, SchedulePlan,
};
pub use model::PretextModel;
pub use pretrain::{
    load_pretrained, read_checkpoint_info, run_pretraining, CheckpointInfo, PretrainRun,
    Pretrainer,
};
