//! Text-tailored vector-quantized autoencoder.
//!
//! Pipeline per image: non-overlapping patches → shared per-patch encoder
//! (`x_f`) → instance normalization (`x_c`) → nearest-neighbor quantization
//! against an `N x D` codebook (`x_q`, indices `z`) → per-patch decoder
//! (`I_g`). Training minimizes pixel + perceptual reconstruction error plus
//! the standard codebook/commitment terms (stop-gradient form); the
//! straight-through estimator copies decoder gradients past the argmin.
//! After training, the encoder + codebook freeze into the tokenizer that
//! the pretext tasks query.

mod encoder;
mod patches;
mod perceptual;
mod quantizer;
mod train;

pub use encoder::{instance_norm, PatchMlp};
pub(crate) use encoder::linear;
pub use patches::{patchify, unpatchify};
pub use perceptual::PerceptualNet;
pub use quantizer::{nearest_indices, quantize, QuantizedResult};
pub use train::{train_tvqvae, TvqvaeEpochLog, TvqvaeTrainConfig};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::params::ParamStore;
use crate::util::rng::seeded_rng;
use crate::util::store::{sha256_hex, write_atomic, TensorStore};

/// Geometry and capacity of the autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvqvaeConfig {
    /// Input image height (32).
    pub img_h: usize,
    /// Input image width (128).
    pub img_w: usize,
    /// Patch height; `img_h / r1` grid rows (default 32 → one row).
    pub r1: usize,
    /// Patch width; `img_w / r2` grid columns (default 16 → eight columns).
    pub r2: usize,
    /// Codebook vocabulary size N.
    pub n_codes: usize,
    /// Codebook embedding dimension D.
    pub dim: usize,
    /// Hidden width of the encoder/decoder MLPs.
    pub hidden: usize,
    /// Residual blocks per MLP.
    pub n_blocks: usize,
    /// Weight of the commitment term in the loss.
    pub commit_weight: f64,
    /// Epsilon inside the instance-norm square root.
    pub in_eps: f64,
    /// Seed of the frozen perceptual extractor (shared across models so
    /// losses are comparable).
    pub perceptual_seed: u64,
}

impl Default for TvqvaeConfig {
    fn default() -> Self {
        Self {
            img_h: 32,
            img_w: 128,
            r1: 32,
            r2: 16,
            n_codes: 512,
            dim: 384,
            hidden: 384,
            n_blocks: 4,
            commit_weight: 0.25,
            in_eps: 1e-5,
            perceptual_seed: 1717,
        }
    }
}

impl TvqvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img_h == 0 || self.img_w == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if self.r1 == 0
            || self.r2 == 0
            || !self.img_h.is_multiple_of(self.r1)
            || !self.img_w.is_multiple_of(self.r2)
        {
            return Err(Error::config(format!(
                "patch {}x{} must divide image {}x{}",
                self.r1, self.r2, self.img_h, self.img_w
            )));
        }
        if self.n_codes < 2 {
            return Err(Error::config("codebook needs at least 2 entries"));
        }
        if self.dim == 0 || self.hidden == 0 {
            return Err(Error::config("feature dimensions must be positive"));
        }
        if self.in_eps.is_nan() || self.in_eps <= 0.0 {
            return Err(Error::config("instance-norm epsilon must be positive"));
        }
        Ok(())
    }

    /// `(rows, columns)` of the patch grid.
    pub fn grid(&self) -> (usize, usize) {
        (self.img_h / self.r1, self.img_w / self.r2)
    }

    /// Total patches per image.
    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened pixel count of one patch.
    pub fn patch_dim(&self) -> usize {
        3 * self.r1 * self.r2
    }
}

/// Everything one forward pass produces.
pub struct TvqvaeOutput {
    /// Pre-normalization per-patch features `(B, P, D)`.
    pub x_f: Tensor,
    /// Content vectors after instance norm `(B, P, D)`.
    pub x_c: Tensor,
    /// Quantization result (indices, embedding rows, straight-through).
    pub quant: QuantizedResult,
    /// Reconstruction `(B, 3, H, W)` decoded from the straight-through
    /// values so gradients reach the encoder.
    pub recon: Tensor,
}

/// Scalar views of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvqvaeLossScalars {
    pub pixel: f64,
    pub perceptual: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Loss terms as live tensors (for backward) — see [`Tvqvae::loss`].
pub struct TvqvaeLoss {
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub codebook: Tensor,
    pub commitment: Tensor,
    pub total: Tensor,
}

impl TvqvaeLoss {
    pub fn scalars(&self) -> Result<TvqvaeLossScalars> {
        let get = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
        };
        Ok(TvqvaeLossScalars {
            pixel: get(&self.pixel)?,
            perceptual: get(&self.perceptual)?,
            codebook: get(&self.codebook)?,
            commitment: get(&self.commitment)?,
            total: get(&self.total)?,
        })
    }
}

/// Mean squared error over all elements.
pub(crate) fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// The autoencoder: per-patch encoder, codebook, per-patch decoder, and a
/// frozen perceptual extractor for the loss.
pub struct Tvqvae {
    cfg: TvqvaeConfig,
    dtype: DType,
    device: Device,
    /// Encoder + decoder parameters (the codebook lives separately).
    pub params: ParamStore,
    embeddings: Var,
    encoder: PatchMlp,
    decoder: PatchMlp,
    perceptual: PerceptualNet,
}

impl Tvqvae {
    /// Fresh model with seeded initialization: He-init MLPs, codebook
    /// uniform in `[-1/N, 1/N)`.
    pub fn new(cfg: &TvqvaeConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype, device);
        let mut rng = seeded_rng(seed, "tvqvae-init", &[]);
        let encoder = PatchMlp::new(
            &mut params,
            "t_encoder",
            cfg.patch_dim(),
            cfg.hidden,
            cfg.dim,
            cfg.n_blocks,
            &mut rng,
        )?;
        let decoder = PatchMlp::new(
            &mut params,
            "decoder",
            cfg.dim,
            cfg.hidden,
            cfg.patch_dim(),
            cfg.n_blocks,
            &mut rng,
        )?;
        let lim = 1.0 / cfg.n_codes as f64;
        let emb_vals: Vec<f64> = {
            use rand::Rng;
            (0..cfg.n_codes * cfg.dim)
                .map(|_| rng.gen_range(-lim..lim))
                .collect()
        };
        let embeddings = Var::from_tensor(
            &Tensor::from_vec(emb_vals, (cfg.n_codes, cfg.dim), device)?.to_dtype(dtype)?,
        )?;
        let perceptual = PerceptualNet::new(cfg.perceptual_seed, dtype, device)?;
        Ok(Self {
            cfg: cfg.clone(),
            dtype,
            device: device.clone(),
            params,
            embeddings,
            encoder,
            decoder,
            perceptual,
        })
    }

    pub fn cfg(&self) -> &TvqvaeConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Live codebook tensor `(N, D)`.
    pub fn embeddings(&self) -> &Tensor {
        self.embeddings.as_tensor()
    }

    pub fn perceptual(&self) -> &PerceptualNet {
        &self.perceptual
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.cfg.img_h || w != self.cfg.img_w {
            return Err(Error::validation(format!(
                "expected (B, 3, {}, {}) input, got (B, {c}, {h}, {w})",
                self.cfg.img_h, self.cfg.img_w
            )));
        }
        Ok(())
    }

    /// Pre-normalization per-patch features `x_f` `(B, P, D)`.
    pub fn encode_features(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let patches = patchify(images, self.cfg.r1, self.cfg.r2)?;
        self.encoder.forward(&patches)
    }

    /// Content vectors `x_c` `(B, P, D)`: encoder output, instance-normed.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        instance_norm(&self.encode_features(images)?, self.cfg.in_eps)
    }

    /// Decodes `(B, P, D)` quantized features into `(B, 3, H, W)` images.
    pub fn decode(&self, x_q: &Tensor) -> Result<Tensor> {
        let (_, p, d) = x_q.dims3()?;
        if p != self.cfg.n_patches() || d != self.cfg.dim {
            return Err(Error::validation(format!(
                "decoder input ({p}, {d}) does not match grid {} x dim {}",
                self.cfg.n_patches(),
                self.cfg.dim
            )));
        }
        let patches = self.decoder.forward(x_q)?;
        unpatchify(&patches, self.cfg.r1, self.cfg.r2, self.cfg.img_h, self.cfg.img_w)
    }

    /// Full training-path forward: encode, quantize, decode the
    /// straight-through values.
    pub fn forward(&self, images: &Tensor) -> Result<TvqvaeOutput> {
        let x_f = self.encode_features(images)?;
        let x_c = instance_norm(&x_f, self.cfg.in_eps)?;
        let quant = quantize(&x_c, self.embeddings.as_tensor())?;
        let recon = self.decode(&quant.straight_through)?;
        Ok(TvqvaeOutput {
            x_f,
            x_c,
            quant,
            recon,
        })
    }

    /// Evaluation-path reconstruction: decode the exact embedding rows.
    /// Returns the reconstruction and the per-image index sequences.
    pub fn reconstruct(&self, images: &Tensor) -> Result<(Tensor, Vec<Vec<u32>>)> {
        let x_c = self.encode(images)?;
        let quant = quantize(&x_c, self.embeddings.as_tensor())?;
        let recon = self.decode(&quant.x_q)?;
        let p = self.cfg.n_patches();
        let per_image = quant.z.chunks(p).map(<[u32]>::to_vec).collect();
        Ok((recon, per_image))
    }

    /// Reconstruction + quantization objective:
    ///
    /// ```text
    /// total = mse(I_g, I_t)                    pixel
    ///       + mse(P(I_g), P(I_t))              perceptual
    ///       + mse(x_q, sg(x_c))                codebook
    ///       + commit_weight · mse(x_c, sg(x_q)) commitment
    /// ```
    ///
    /// `target_features` may carry precomputed `P(I_t)` (training caches
    /// them since targets never change).
    pub fn loss(
        &self,
        output: &TvqvaeOutput,
        targets: &Tensor,
        target_features: Option<&Tensor>,
    ) -> Result<TvqvaeLoss> {
        let pixel = mse(&output.recon, targets)?;
        let h_g = self.perceptual.features(&output.recon)?;
        let h_t = match target_features {
            Some(f) => f.clone(),
            None => self.perceptual.features(targets)?.detach(),
        };
        let perceptual = mse(&h_g, &h_t)?;
        let codebook = mse(&output.quant.x_q, &output.x_c.detach())?;
        let commitment = mse(&output.x_c, &output.quant.x_q.detach())?;
        let total = (((&pixel + &perceptual)? + &codebook)?
            + (&commitment * self.cfg.commit_weight)?)?;
        Ok(TvqvaeLoss {
            pixel,
            perceptual,
            codebook,
            commitment,
            total,
        })
    }

    /// All trainable `(name, var)` pairs in deterministic order: sorted
    /// encoder/decoder parameters, then the codebook.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .params
            .named()
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        out.push(("quantizer.embeddings".to_string(), self.embeddings.clone()));
        out
    }

    /// Overwrites codebook rows in `dead` with the given replacement
    /// vectors (used by dead-code reseeding between epochs).
    pub fn overwrite_codes(&mut self, dead: &[usize], replacements: &[Vec<f32>]) -> Result<()> {
        if dead.len() != replacements.len() {
            return Err(Error::validation(format!(
                "{} dead codes but {} replacements",
                dead.len(),
                replacements.len()
            )));
        }
        if dead.is_empty() {
            return Ok(());
        }
        let mut emb = self
            .embeddings
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let d = self.cfg.dim;
        for (&k, row) in dead.iter().zip(replacements) {
            if k >= self.cfg.n_codes || row.len() != d {
                return Err(Error::validation(format!(
                    "bad reseed target {k} (row len {})",
                    row.len()
                )));
            }
            emb[k * d..(k + 1) * d].copy_from_slice(row);
        }
        let t = Tensor::from_vec(emb, (self.cfg.n_codes, d), &self.device)?
            .to_dtype(self.dtype)?;
        self.embeddings.set(&t)?;
        Ok(())
    }

    /// Serializes to the codebook file format (see [`save_file_docs`]).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        write_atomic(path, &self.to_file_bytes()?)
    }

    /// Codebook file layout (integers little-endian):
    ///
    /// ```text
    /// magic       8   b"LEGOTKCB"
    /// version     u32 = 1
    /// N, D, r1, r2    u64 each
    /// embeddings  N·D f32, row-major
    /// blob len    u64
    /// blob            nested tensor store: remaining config as metadata
    ///                 plus all encoder/decoder parameters
    /// digest      32  sha256 over everything above
    /// ```
    pub fn to_file_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(FILE_MAGIC);
        buf.extend_from_slice(&1u32.to_le_bytes());
        for v in [self.cfg.n_codes, self.cfg.dim, self.cfg.r1, self.cfg.r2] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        let emb = self
            .embeddings
            .as_tensor()
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        for v in &emb {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut blob = TensorStore::new();
        blob.set_meta("img_h", self.cfg.img_h);
        blob.set_meta("img_w", self.cfg.img_w);
        blob.set_meta("hidden", self.cfg.hidden);
        blob.set_meta("n_blocks", self.cfg.n_blocks);
        blob.set_meta("perceptual_seed", self.cfg.perceptual_seed);
        blob.set_meta("dtype", dtype_tag(self.dtype)?);
        blob.set_meta_f64("commit_weight", self.cfg.commit_weight);
        blob.set_meta_f64("in_eps", self.cfg.in_eps);
        self.params.export(&mut blob, "model")?;
        let blob_bytes = blob.to_bytes();
        buf.extend_from_slice(&(blob_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&blob_bytes);
        let digest = {
            use sha2::Digest as _;
            sha2::Sha256::digest(&buf)
        };
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    /// Loads a model saved by [`save`], verifying the content digest.
    pub fn load(path: &std::path::Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_file_bytes(&bytes, device)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }

    pub fn from_file_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        use sha2::Digest as _;
        if bytes.len() < 8 + 4 + 32 + 32 {
            return Err(Error::format("codebook file truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if sha2::Sha256::digest(body).as_slice() != digest {
            return Err(Error::format("codebook file digest mismatch (corrupt)"));
        }
        let mut r = body;
        let take = |r: &mut &[u8], n: usize| -> Result<Vec<u8>> {
            if r.len() < n {
                return Err(Error::format("codebook file truncated"));
            }
            let (head, rest) = r.split_at(n);
            *r = rest;
            Ok(head.to_vec())
        };
        if take(&mut r, 8)? != FILE_MAGIC {
            return Err(Error::format("codebook file magic mismatch"));
        }
        let version = u32::from_le_bytes(take(&mut r, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::format(format!("unsupported codebook version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u64::from_le_bytes(take(&mut r, 8)?.try_into().unwrap()) as usize;
        }
        let [n, d, r1, r2] = dims;
        let mut emb = vec![0f32; n * d];
        let raw = take(&mut r, n * d * 4)?;
        for (v, c) in emb.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap());
        }
        let blob_len = u64::from_le_bytes(take(&mut r, 8)?.try_into().unwrap()) as usize;
        let blob = TensorStore::from_bytes(&take(&mut r, blob_len)?)?;
        if !r.is_empty() {
            return Err(Error::format("codebook file has trailing bytes"));
        }

        let dtype = tag_dtype(blob.meta("dtype").unwrap_or("f32"))?;
        let cfg = TvqvaeConfig {
            img_h: blob.meta_u64("img_h")? as usize,
            img_w: blob.meta_u64("img_w")? as usize,
            r1,
            r2,
            n_codes: n,
            dim: d,
            hidden: blob.meta_u64("hidden")? as usize,
            n_blocks: blob.meta_u64("n_blocks")? as usize,
            commit_weight: blob.meta_f64("commit_weight")?,
            in_eps: blob.meta_f64("in_eps")?,
            perceptual_seed: blob.meta_u64("perceptual_seed")?,
        };
        let mut model = Self::new(&cfg, 0, dtype, device)?;
        model.params.import(&blob, "model")?;
        let emb_t = Tensor::from_vec(emb, (n, d), device)?.to_dtype(dtype)?;
        model.embeddings.set(&emb_t)?;
        Ok(model)
    }

    /// Hash of the serialized model; equal hashes mean equal parameters,
    /// config, and codebook.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_file_bytes()?))
    }
}

const FILE_MAGIC: &[u8; 8] = b"LEGOTKCB";

fn dtype_tag(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::config(format!("unsupported model dtype {other:?}"))),
    }
}

fn tag_dtype(tag: &str) -> Result<DType> {
    match tag {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::format(format!("unknown dtype tag {other}"))),
    }
}
