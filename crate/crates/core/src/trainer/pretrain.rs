//! The joint pretraining loop: step execution, metrics logging, atomic
//! checkpoints, and bit-exact resume.
//!
//! Determinism contract: a `(config, samples, codebook)` triple fixes the
//! whole run. Every random draw — epoch shuffling, the two augmented views,
//! mask positions, strip permutations, positive substitution — derives
//! statelessly from the config seed and the global step, so resuming from a
//! checkpoint replays exactly the steps the uninterrupted run would have
//! taken.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use crate::codebook::{TextKnowledgeCodebook, N_SLOTS};
use crate::corpus::{make_view_pair, AugmentationPolicy, TextSample};
use crate::error::{Error, Result};
use crate::pretext::{
    make_mask_plan, make_permutation, valid_orders_capped, MaskPlan, VALID_ORDER_CAP,
};
use crate::util::image::Image;
use crate::util::optim::{AdamW, AdamWConfig};
use crate::util::rng::{derive_seed, seeded_rng};
use crate::util::store::TensorStore;

use super::config::{lr_schedule, LossBundle, MetricsRecord, PretrainConfig, SchedulePlan};
use super::model::PretextModel;

/// Checkpoint identity fields, readable without reconstructing the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointInfo {
    /// Global steps completed when the checkpoint was written.
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Canonical TOML of the config that produced the checkpoint.
    pub config_toml: String,
    pub codebook_hash: String,
    /// Embedding width of the codebook the run attended over.
    pub codebook_dim: usize,
}

fn checkpoint_info(store: &TensorStore) -> Result<CheckpointInfo> {
    let get = |key: &str| {
        store
            .meta(key)
            .map(str::to_string)
            .ok_or_else(|| Error::format(format!("checkpoint is missing meta key {key}")))
    };
    Ok(CheckpointInfo {
        step: store.meta_u64("schedule.step")?,
        seed: store.meta_u64("seed")?,
        config_hash: get("config.hash")?,
        config_toml: get("config.toml")?,
        codebook_hash: get("codebook.hash")?,
        codebook_dim: store.meta_u64("codebook.dim")? as usize,
    })
}

/// Reads a checkpoint's identity fields without loading tensors into a
/// model (cheap enough for CLI inspection).
pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    checkpoint_info(&TensorStore::load(path)?)
}

/// Rebuilds the model a checkpoint was saved from: the stored config and
/// codebook width reconstruct the architecture, then both branches are
/// restored. Downstream heads use the returned model's encoder.
pub fn load_pretrained(path: &Path, device: &Device) -> Result<(PretextModel, CheckpointInfo)> {
    let store = TensorStore::load(path)?;
    let info = checkpoint_info(&store)?;
    let cfg = PretrainConfig::from_toml_str(&info.config_toml)?;
    let mut model = PretextModel::new(&cfg, info.codebook_dim, DType::F32, device)?;
    model.import(&store)?;
    Ok((model, info))
}

/// Summary of one [`Pretrainer::run`] call.
#[derive(Debug, Clone)]
pub struct PretrainRun {
    /// Path of the final checkpoint.
    pub checkpoint: PathBuf,
    /// Records for the steps executed by this call (empty if the run was
    /// already complete).
    pub records: Vec<MetricsRecord>,
    /// Global step count after the run.
    pub final_step: u64,
}

/// Joint pretraining over a fixed sample set and a frozen codebook.
pub struct Pretrainer<'a> {
    cfg: PretrainConfig,
    plan: SchedulePlan,
    model: PretextModel,
    opt: AdamW,
    codebook: &'a TextKnowledgeCodebook,
    samples: Vec<TextSample>,
    /// All images as one `(N, 3, H, W)` tensor, in sample order.
    images: Tensor,
    /// Codebook token sequence per sample.
    tokens: Vec<[u32; N_SLOTS]>,
    /// Retrieved codebook latents, `(N, 8, codebook_dim)`, detached.
    latents: Tensor,
    policy: AugmentationPolicy,
    gstep: u64,
    cached_epoch: Option<u64>,
    epoch_order: Vec<u32>,
}

impl<'a> Pretrainer<'a> {
    /// Builds a fresh run: initializes the model from the config seed and
    /// tokenizes every sample once against the frozen codebook.
    pub fn new(
        cfg: &PretrainConfig,
        samples: Vec<TextSample>,
        codebook: &'a TextKnowledgeCodebook,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.n_portions != N_SLOTS {
            return Err(Error::config(format!(
                "valid-order expansion needs one codebook index per portion, \
                 so n_portions must equal {N_SLOTS} (got {})",
                cfg.n_portions
            )));
        }
        let plan = cfg.schedule(samples.len())?;
        for s in &samples {
            s.validate()?;
        }
        let model = PretextModel::new(cfg, codebook.dim(), DType::F32, device)?;
        let opt = AdamW::new(
            model.trainable(),
            AdamWConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: 1e-8,
                weight_decay: cfg.weight_decay,
            },
        )?;

        let image_refs: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let images = Image::batch_to_tensor_refs(&image_refs, device)?.to_dtype(DType::F32)?;

        // Tokenize in bounded chunks, then retrieve all latents at once.
        let mut sequences = Vec::with_capacity(samples.len());
        for (start, chunk) in samples.chunks(256).enumerate().map(|(i, c)| (i * 256, c)) {
            let ids: Vec<String> = chunk.iter().map(|s| s.sample_id.clone()).collect();
            let batch = images.narrow(0, start, chunk.len())?;
            sequences.extend(codebook.tokenize_batch(&batch, &ids)?);
        }
        let latents = codebook
            .retrieve_latents_batch(&sequences)?
            .to_dtype(DType::F32)?
            .detach();
        let tokens = sequences.into_iter().map(|s| s.indices).collect();

        Ok(Self {
            policy: AugmentationPolicy {
                seed: cfg.seed,
                ..AugmentationPolicy::default()
            },
            cfg: cfg.clone(),
            plan,
            model,
            opt,
            codebook,
            samples,
            images,
            tokens,
            latents,
            gstep: 0,
            cached_epoch: None,
            epoch_order: Vec::new(),
        })
    }

    /// Rebuilds a run from a checkpoint. The supplied config and codebook
    /// must match the ones recorded at save time; a mismatch is refused
    /// rather than silently training something else.
    pub fn resume(
        cfg: &PretrainConfig,
        samples: Vec<TextSample>,
        codebook: &'a TextKnowledgeCodebook,
        device: &Device,
        checkpoint: &Path,
    ) -> Result<Self> {
        let store = TensorStore::load(checkpoint)?;
        let info = checkpoint_info(&store)?;
        if info.config_hash != cfg.content_hash()? {
            return Err(Error::validation(format!(
                "checkpoint was written with a different config (hash {} vs {})",
                info.config_hash,
                cfg.content_hash()?
            )));
        }
        if info.codebook_hash != codebook.content_hash() {
            return Err(Error::validation(format!(
                "checkpoint was written against a different codebook (hash {} vs {})",
                info.codebook_hash,
                codebook.content_hash()
            )));
        }
        let mut t = Self::new(cfg, samples, codebook, device)?;
        t.model.import(&store)?;
        t.opt.import(&store, "opt")?;
        t.gstep = info.step;
        Ok(t)
    }

    pub fn global_step(&self) -> u64 {
        self.gstep
    }

    pub fn plan(&self) -> &SchedulePlan {
        &self.plan
    }

    pub fn model(&self) -> &PretextModel {
        &self.model
    }

    pub fn is_complete(&self) -> bool {
        self.gstep >= self.plan.total_steps
    }

    /// Sample order for `epoch`, reshuffled from a per-epoch derived seed.
    fn order_for_epoch(&mut self, epoch: u64) -> &[u32] {
        if self.cached_epoch != Some(epoch) {
            let mut order: Vec<u32> = (0..self.samples.len() as u32).collect();
            order.shuffle(&mut seeded_rng(self.cfg.seed, "pretrain-epoch-order", &[epoch]));
            self.epoch_order = order;
            self.cached_epoch = Some(epoch);
        }
        &self.epoch_order
    }

    /// Executes one optimization step and returns its metrics record.
    ///
    /// Task weights of exactly 0 skip that task's forward pass entirely —
    /// a zero-weighted loss contributes exactly zero gradient either way,
    /// so the trajectory is unchanged — and log the loss as 0.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        if self.is_complete() {
            return Err(Error::validation(format!(
                "run already complete at step {}",
                self.gstep
            )));
        }
        let cfg = self.cfg.clone();
        let device = self.images.device().clone();
        let bs = cfg.batch_size;
        let spe = self.plan.steps_per_epoch;
        let (epoch, pos) = (self.gstep / spe, (self.gstep % spe) as usize);
        let ids: Vec<u32> = self.order_for_epoch(epoch)[pos * bs..(pos + 1) * bs].to_vec();

        // Assemble the step's inputs: two augmented views per image for the
        // contrastive task, the un-augmented image for the other two, and
        // the per-image mask plans, permutations, and valid labelings.
        let mut views_a = Vec::with_capacity(bs);
        let mut views_b = Vec::with_capacity(bs);
        let mut indices = Vec::with_capacity(bs);
        let mut plans: Vec<MaskPlan> = Vec::with_capacity(bs);
        let mut orders = Vec::with_capacity(bs);
        let mut valid = Vec::with_capacity(bs);
        for (j, &id) in ids.iter().enumerate() {
            let sample = &self.samples[id as usize];
            let coords = [self.gstep, j as u64];
            let pair = make_view_pair(
                &sample.image,
                &sample.sample_id,
                &self.policy,
                derive_seed(cfg.seed, "pretrain-views", &coords),
            );
            views_a.push(pair.view_a);
            views_b.push(pair.view_b);
            indices.push(self.tokens[id as usize]);
            plans.push(make_mask_plan(
                cfg.vit.n_tokens(),
                cfg.mask_ratio,
                derive_seed(cfg.seed, "pretrain-mask", &coords),
            )?);
            let order = make_permutation(
                cfg.n_portions,
                &mut seeded_rng(cfg.seed, "pretrain-shuffle", &coords),
            )?;
            valid.push(valid_orders_capped(
                &self.tokens[id as usize],
                &order,
                VALID_ORDER_CAP,
            )?);
            orders.push(order);
        }
        let ids_t = Tensor::from_vec(ids, bs, &device)?;
        let batch = self.images.index_select(&ids_t, 0)?;
        let latents = self.latents.index_select(&ids_t, 0)?;
        let va = Image::batch_to_tensor(&views_a, &device)?.to_dtype(DType::F32)?;
        let vb = Image::batch_to_tensor(&views_b, &device)?.to_dtype(DType::F32)?;

        let sid = self.model.sid(
            &va,
            &vb,
            &indices,
            derive_seed(cfg.seed, "pretrain-sid", &[self.gstep]),
        )?;
        let l_c = sid.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let mut total = sid.loss;
        let mut l_m = 0.0;
        if cfg.alpha != 0.0 {
            let t = self.model.mim(&batch, &latents, &plans)?;
            l_m = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            total = (total + (t * cfg.alpha)?)?;
        }
        let mut l_r = 0.0;
        if cfg.beta != 0.0 {
            let t = self.model.rtr(&batch, &orders, &valid)?;
            l_r = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            total = (total + (t * cfg.beta)?)?;
        }
        // Validates finiteness (naming the offending task) before any
        // parameter is touched, so an abort checkpoint holds the last good
        // state.
        let bundle = LossBundle::new(l_c, l_m, l_r, cfg.alpha, cfg.beta)?;

        let lr = lr_schedule(self.gstep, &self.plan);
        let grads = total.backward()?;
        self.opt.step(&grads, lr, Some(cfg.grad_clip))?;
        self.model.ema_step()?;

        let record = MetricsRecord {
            step: self.gstep,
            l_c: bundle.l_c,
            l_m: bundle.l_m,
            l_r: bundle.l_r,
            total: bundle.total,
            lr,
        };
        self.gstep += 1;
        Ok(record)
    }

    /// Serializes the full run state — both parameter branches, optimizer
    /// moments, step counters, and identity hashes — atomically.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut store = TensorStore::new();
        self.model.export(&mut store)?;
        self.opt.export(&mut store, "opt")?;
        store.set_meta("schedule.step", self.gstep);
        store.set_meta("seed", self.cfg.seed);
        store.set_meta("config.hash", self.cfg.content_hash()?);
        store.set_meta("config.toml", self.cfg.to_toml_string()?);
        store.set_meta("codebook.hash", self.codebook.content_hash());
        store.set_meta("codebook.dim", self.codebook.dim());
        store.save(path)
    }

    /// Runs to the configured step count, appending one metrics line per
    /// step to `out_dir/metrics.ndjson` and writing the final checkpoint to
    /// `out_dir/pretrain.ckpt`. A non-finite loss checkpoints the last good
    /// state to `out_dir/abort.ckpt` and returns the divergence error.
    pub fn run(&mut self, out_dir: &Path) -> Result<PretrainRun> {
        std::fs::create_dir_all(out_dir)?;
        let metrics_path = out_dir.join("metrics.ndjson");
        let checkpoint = out_dir.join("pretrain.ckpt");
        let mut metrics = std::io::BufWriter::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(self.gstep > 0)
                .truncate(self.gstep == 0)
                .write(true)
                .open(&metrics_path)?,
        );
        let mut records = Vec::new();
        while !self.is_complete() {
            match self.step() {
                Ok(record) => {
                    serde_json::to_writer(&mut metrics, &record)?;
                    metrics.write_all(b"\n")?;
                    metrics.flush()?;
                    records.push(record);
                }
                Err(e @ Error::Diverged(_)) => {
                    self.save_checkpoint(&out_dir.join("abort.ckpt"))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        self.save_checkpoint(&checkpoint)?;
        // The codebook wrapper is read-only; verify the underlying model
        // still hashes to what it did when this run started.
        let now = self.codebook.model().content_hash()?;
        if now != self.codebook.content_hash() {
            return Err(Error::validation(format!(
                "codebook hash changed during the run: {} -> {now}",
                self.codebook.content_hash()
            )));
        }
        Ok(PretrainRun {
            checkpoint,
            records,
            final_step: self.gstep,
        })
    }
}

/// End-to-end entry point: fresh run, or resume when `resume` names a
/// checkpoint written by the same config and codebook.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    samples: Vec<TextSample>,
    codebook: &TextKnowledgeCodebook,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainRun> {
    let mut trainer = match resume {
        Some(path) => Pretrainer::resume(cfg, samples, codebook, &Device::Cpu, path)?,
        None => Pretrainer::new(cfg, samples, codebook, &Device::Cpu)?,
    };
    trainer.run(out_dir)
}
