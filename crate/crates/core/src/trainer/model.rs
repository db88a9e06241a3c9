//! The joint pretraining model: one shared encoder feeding three task
//! heads, plus the momentum branch for the contrastive task.
//!
//! Parameter layout (names inside the online store):
//!
//! ```text
//! vit.*            shared encoder
//! proj.*           contrastive projection MLP
//! pred.*           contrastive prediction MLP (online branch only)
//! mim.mask_token   learned replacement for masked patch embeddings
//! mim.cross{i}.*   cross-attention over frozen codebook latents
//! mim.dec.*        per-token pixel decoder
//! rtr.*            Mixer rank head
//! ```
//!
//! The momentum store carries copies of `vit.*` and `proj.*` only — the
//! prediction head is deliberately asymmetric — and is updated exclusively
//! by [`PretextModel::ema_step`], never by the optimizer.

use candle_core::{DType, Device, Tensor, Var};

use crate::codebook::N_SLOTS;
use crate::error::Result;
use crate::pretext::{
    apply_mask, ema_update, instance_map, rtr_loss, shuffle_strips, sid_loss, CrossAttend,
    MaskPlan, MimDecoder, MixerRankHead, MlpHead, SidOutcome, ViTEncoder,
};
use crate::util::params::ParamStore;
use crate::util::rng::seeded_rng;
use crate::util::store::TensorStore;

use super::config::PretrainConfig;

/// Encoder, task heads, and momentum branch for joint pretraining.
pub struct PretextModel {
    cfg: PretrainConfig,
    codebook_dim: usize,
    online: ParamStore,
    momentum: ParamStore,
    vit: ViTEncoder,
    proj: MlpHead,
    pred: MlpHead,
    mask_token: Tensor,
    cross: Vec<CrossAttend>,
    mim_dec: MimDecoder,
    rtr_head: MixerRankHead,
    m_vit: ViTEncoder,
    m_proj: MlpHead,
}

impl PretextModel {
    /// Builds the model from the config seed. `codebook_dim` is the width
    /// of the frozen codebook's embedding rows (keys/values of the
    /// cross-attention blocks).
    pub fn new(
        cfg: &PretrainConfig,
        codebook_dim: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let v = &cfg.vit;
        let mut online = ParamStore::new(dtype, device);
        let mut rng = seeded_rng(cfg.seed, "pretrain-init", &[]);
        let vit = ViTEncoder::new(&mut online, "vit", v, &mut rng)?;
        let proj = MlpHead::new(
            &mut online,
            "proj",
            &[v.dim, cfg.proj_hidden, cfg.proj_hidden, cfg.proj_dim],
            &mut rng,
        )?;
        let pred = MlpHead::new(
            &mut online,
            "pred",
            &[cfg.proj_dim, cfg.pred_hidden, cfg.proj_dim],
            &mut rng,
        )?;
        let mask_token = online.normal("mim.mask_token", &[v.dim], 0.0, 0.02, &mut rng)?;
        let cross = (0..cfg.mim_blocks)
            .map(|i| {
                CrossAttend::new(
                    &mut online,
                    &format!("mim.cross{i}"),
                    v.dim,
                    codebook_dim,
                    v.heads,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mim_dec = MimDecoder::new(
            &mut online,
            "mim.dec",
            v.dim,
            (v.patch_h, v.patch_w),
            (v.img_h, v.img_w),
            &mut rng,
        )?;
        let rtr_head = MixerRankHead::new(&mut online, "rtr", cfg.n_portions, v.dim, &mut rng)?;

        // The momentum branch mirrors the encoder and projection head. Its
        // init values are throwaways: the copy below overwrites them.
        let mut momentum = ParamStore::new(dtype, device);
        let mut m_rng = seeded_rng(cfg.seed, "pretrain-momentum-init", &[]);
        let m_vit = ViTEncoder::new(&mut momentum, "vit", v, &mut m_rng)?;
        let m_proj = MlpHead::new(
            &mut momentum,
            "proj",
            &[v.dim, cfg.proj_hidden, cfg.proj_hidden, cfg.proj_dim],
            &mut m_rng,
        )?;
        ema_update(&momentum, &online, 0.0)?; // decay 0 = copy online values

        Ok(Self {
            cfg: cfg.clone(),
            codebook_dim,
            online,
            momentum,
            vit,
            proj,
            pred,
            mask_token,
            cross,
            mim_dec,
            rtr_head,
            m_vit,
            m_proj,
        })
    }

    pub fn cfg(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn codebook_dim(&self) -> usize {
        self.codebook_dim
    }

    /// The shared encoder (online branch) — downstream heads build on it.
    pub fn encoder(&self) -> &ViTEncoder {
        &self.vit
    }

    pub fn online(&self) -> &ParamStore {
        &self.online
    }

    pub fn momentum(&self) -> &ParamStore {
        &self.momentum
    }

    /// `(name, var)` pairs the optimizer updates (online branch only).
    pub fn trainable(&self) -> Vec<(String, Var)> {
        self.online
            .named()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect()
    }

    /// One EMA update of the momentum branch from the online branch.
    pub fn ema_step(&self) -> Result<()> {
        ema_update(&self.momentum, &self.online, self.cfg.ema_m)
    }

    /// Online-branch frame embeddings for one view: encoder, frame pooling,
    /// projection, prediction. `(B, 3, H, W)` → `(B, 8, proj_dim)`.
    pub fn queries(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.vit.forward(images)?;
        let frames = instance_map(&tokens, self.cfg.vit.grid(), N_SLOTS)?;
        self.pred.forward(&self.proj.forward(&frames)?)
    }

    /// Momentum-branch frame embeddings (no prediction head, detached).
    pub fn keys(&self, images: &Tensor) -> Result<Tensor> {
        let tokens = self.m_vit.forward(images)?;
        let frames = instance_map(&tokens, self.cfg.vit.grid(), N_SLOTS)?;
        Ok(self.m_proj.forward(&frames)?.detach())
    }

    /// Contrastive loss over two augmented views of a batch. `indices`
    /// carries each image's codebook token sequence (from the un-augmented
    /// image); `seed` drives positive substitution.
    pub fn sid(
        &self,
        view_a: &Tensor,
        view_b: &Tensor,
        indices: &[[u32; N_SLOTS]],
        seed: u64,
    ) -> Result<SidOutcome> {
        let q = self.queries(view_a)?;
        let k = self.keys(view_b)?;
        sid_loss(&q, &k, indices, self.cfg.tau, seed)
    }

    /// Masked-reconstruction loss: embed, mask, encode, attend over the
    /// frozen codebook latents, decode, and compare masked pixels.
    /// `latents` is `(B, 8, codebook_dim)`; it is detached here, so the
    /// frozen codebook never receives gradients.
    pub fn mim(&self, images: &Tensor, latents: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let latents = latents.detach();
        let tokens = self.vit.embed(images)?;
        let masked = apply_mask(&tokens, plans, &self.mask_token)?;
        let mut x = self.vit.encode_embedded(&masked)?;
        for block in &self.cross {
            x = block.forward(&x, &latents)?;
        }
        let recon = self.mim_dec.forward(&x)?;
        let v = &self.cfg.vit;
        masked_pixels_loss(&recon, images, plans, v.grid(), (v.patch_h, v.patch_w))
    }

    /// Rearrangement loss: shuffle strips, encode, pool per portion, rank,
    /// and take each image's best valid labeling. `orders[i]` is the
    /// permutation applied to image `i`; `valid[i]` its admissible
    /// labelings under codebook-index equality.
    pub fn rtr(
        &self,
        images: &Tensor,
        orders: &[Vec<usize>],
        valid: &[Vec<Vec<usize>>],
    ) -> Result<Tensor> {
        if valid.len() != images.dims4()?.0 {
            return Err(crate::error::Error::validation(format!(
                "{} valid-labeling sets for a batch of {}",
                valid.len(),
                images.dims4()?.0
            )));
        }
        let shuffled = shuffle_strips(images, orders)?;
        let tokens = self.vit.forward(&shuffled)?;
        let portions = instance_map(&tokens, self.cfg.vit.grid(), self.cfg.n_portions)?;
        let logits = self.rtr_head.forward(&portions)?;
        let per_image = valid
            .iter()
            .enumerate()
            .map(|(i, v)| rtr_loss(&logits.get(i)?, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&per_image, 0)?.mean(0)?)
    }

    /// Exports both branches into `store` under `online.*` / `momentum.*`.
    pub fn export(&self, store: &mut TensorStore) -> Result<()> {
        self.online.export(store, "online")?;
        self.momentum.export(store, "momentum")
    }

    /// Restores both branches from an [`export`](Self::export) snapshot.
    pub fn import(&mut self, store: &TensorStore) -> Result<()> {
        self.online.import(store, "online")?;
        self.momentum.import(store, "momentum")
    }
}

/// Thin alias so the model module reads top-down; the loss itself lives
/// with the masking code.
fn masked_pixels_loss(
    recon: &Tensor,
    target: &Tensor,
    plans: &[MaskPlan],
    grid: (usize, usize),
    patch: (usize, usize),
) -> Result<Tensor> {
    crate::pretext::masked_l1(recon, target, plans, grid, patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretext::{make_mask_plan, make_permutation, valid_orders_capped, ViTConfig, VALID_ORDER_CAP};

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            proj_hidden: 24,
            proj_dim: 16,
            pred_hidden: 20,
            vit: ViTConfig {
                dim: 32,
                depth: 1,
                heads: 2,
                ..ViTConfig::default()
            },
            ..PretrainConfig::desk()
        }
    }

    fn random_images(b: usize, seed: u64, device: &Device) -> Tensor {
        use rand::Rng;
        let mut rng = seeded_rng(seed, "model-test-images", &[]);
        let n = b * 3 * 32 * 128;
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (b, 3, 32, 128), device).unwrap()
    }

    #[test]
    fn construction_is_seed_deterministic_and_momentum_copies_online() {
        let dev = Device::Cpu;
        let cfg = tiny_cfg();
        let a = PretextModel::new(&cfg, 48, DType::F32, &dev).unwrap();
        let b = PretextModel::new(&cfg, 48, DType::F32, &dev).unwrap();
        assert_eq!(
            a.online().content_hash().unwrap(),
            b.online().content_hash().unwrap()
        );
        assert_eq!(
            a.momentum().content_hash().unwrap(),
            b.momentum().content_hash().unwrap()
        );
        // Momentum tensors start as exact copies of their online namesakes.
        for (name, var) in a.momentum().named() {
            let m = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let q = a
                .online()
                .get(name)
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            assert_eq!(m, q, "momentum {name} differs from online at init");
        }
        // And the momentum branch holds encoder + projection only.
        assert!(a.momentum().named().all(|(n, _)| {
            n.starts_with("vit.") || n.starts_with("proj.")
        }));
        assert!(a.online().get("pred.fc0.weight").is_ok());
        assert!(a.momentum().get("pred.fc0.weight").is_err());
    }

    #[test]
    fn ema_step_blends_toward_online() {
        let dev = Device::Cpu;
        let mut cfg = tiny_cfg();
        cfg.ema_m = 0.75;
        let model = PretextModel::new(&cfg, 48, DType::F32, &dev).unwrap();
        let online_var = model.online().get("proj.fc0.bias").unwrap();
        let before = online_var.as_tensor().to_vec1::<f32>().unwrap();
        let bump = (online_var.as_tensor() + 1.0).unwrap();
        online_var.set(&bump).unwrap();
        model.ema_step().unwrap();
        let m = model
            .momentum()
            .get("proj.fc0.bias")
            .unwrap()
            .as_tensor()
            .to_vec1::<f32>()
            .unwrap();
        for (mi, bi) in m.iter().zip(&before) {
            // 0.75 * old + 0.25 * (old + 1) = old + 0.25.
            assert!((mi - (bi + 0.25)).abs() < 1e-6);
        }
    }

    #[test]
    fn task_forwards_produce_finite_scalars_with_gradients() {
        let dev = Device::Cpu;
        let cfg = tiny_cfg();
        let codebook_dim = 48;
        let model = PretextModel::new(&cfg, codebook_dim, DType::F32, &dev).unwrap();
        let b = 2;
        let images = random_images(b, 1, &dev);
        let views_a = random_images(b, 2, &dev);
        let views_b = random_images(b, 3, &dev);

        let q = model.queries(&views_a).unwrap();
        assert_eq!(q.dims(), &[b, N_SLOTS, cfg.proj_dim]);
        let k = model.keys(&views_b).unwrap();
        assert_eq!(k.dims(), &[b, N_SLOTS, cfg.proj_dim]);

        let indices = [[0u32, 1, 2, 3, 4, 5, 6, 7], [3, 3, 9, 9, 1, 2, 5, 7]];
        let sid = model.sid(&views_a, &views_b, &indices, 7).unwrap();
        let l_c = sid.loss.to_scalar::<f32>().unwrap();
        assert!(l_c.is_finite() && l_c > 0.0);

        let t = cfg.vit.n_tokens();
        let plans: Vec<MaskPlan> = (0..b)
            .map(|i| make_mask_plan(t, cfg.mask_ratio, 100 + i as u64).unwrap())
            .collect();
        let latents = random_images(1, 4, &dev)
            .flatten_all()
            .unwrap()
            .narrow(0, 0, b * N_SLOTS * codebook_dim)
            .unwrap()
            .reshape((b, N_SLOTS, codebook_dim))
            .unwrap();
        let l_m_t = model.mim(&images, &latents, &plans).unwrap();
        let l_m = l_m_t.to_scalar::<f32>().unwrap();
        assert!(l_m.is_finite() && l_m > 0.0);

        let orders: Vec<Vec<usize>> = (0..b)
            .map(|i| {
                make_permutation(
                    cfg.n_portions,
                    &mut seeded_rng(50 + i as u64, "model-test-perm", &[]),
                )
                .unwrap()
            })
            .collect();
        let valid: Vec<Vec<Vec<usize>>> = (0..b)
            .map(|i| valid_orders_capped(&indices[i], &orders[i], VALID_ORDER_CAP).unwrap())
            .collect();
        let l_r_t = model.rtr(&images, &orders, &valid).unwrap();
        let l_r = l_r_t.to_scalar::<f32>().unwrap();
        assert!(l_r.is_finite() && l_r > 0.0);

        // The shared encoder receives gradients from every task head.
        let total = ((sid.loss + (l_m_t * cfg.alpha).unwrap()).unwrap()
            + (l_r_t * cfg.beta).unwrap())
        .unwrap();
        let grads = total.backward().unwrap();
        let embed = model.online().get("vit.embed.weight").unwrap();
        let g = grads.get(embed.as_tensor()).expect("encoder gradient missing");
        let gn = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(gn > 0.0, "encoder gradient is exactly zero");
        // The momentum branch stays out of the graph.
        let m_embed = model.momentum().get("vit.embed.weight").unwrap();
        assert!(grads.get(m_embed.as_tensor()).is_none());
    }

    #[test]
    fn export_import_round_trips_both_branches() {
        let dev = Device::Cpu;
        let cfg = tiny_cfg();
        let model = PretextModel::new(&cfg, 48, DType::F32, &dev).unwrap();
        let mut snap = TensorStore::new();
        model.export(&mut snap).unwrap();

        let mut cfg2 = cfg.clone();
        cfg2.seed = 999; // different init, then overwritten by import
        let mut other = PretextModel::new(&cfg2, 48, DType::F32, &dev).unwrap();
        assert_ne!(
            other.online().content_hash().unwrap(),
            model.online().content_hash().unwrap()
        );
        other.import(&snap).unwrap();
        assert_eq!(
            other.online().content_hash().unwrap(),
            model.online().content_hash().unwrap()
        );
        assert_eq!(
            other.momentum().content_hash().unwrap(),
            model.momentum().content_hash().unwrap()
        );
    }
}
