//! Codebook-aware contrastive task over column-band frames.
//!
//! Each image is pooled into eight frames (one per codebook slot). A frame
//! from one augmented view is the query; frames from the other view, run
//! through a momentum copy of the encoder, are the keys. Codebook indices
//! decide which keys are usable negatives (different index only) and which
//! may substitute for the positive (same index, different image).

use candle_core::{D, Tensor};
use candle_nn::{Linear, Module};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::N_SLOTS;
use crate::error::{Error, Result};
use crate::util::params::ParamStore;
use crate::util::rng::seeded_rng;

/// How many top-similarity candidates the positive substitution samples from.
const TOP_K_POSITIVES: usize = 5;

/// Mean-pools a `(B, T, D)` token grid into `(B, n_frames, D)` frames,
/// one per vertical band of `grid.1 / n_frames` token columns.
pub fn instance_map(tokens: &Tensor, grid: (usize, usize), n_frames: usize) -> Result<Tensor> {
    let (b, t, d) = tokens.dims3()?;
    let (gh, gw) = grid;
    if gh * gw != t {
        return Err(Error::validation(format!(
            "grid {gh}x{gw} does not match {t} tokens"
        )));
    }
    if n_frames == 0 || !gw.is_multiple_of(n_frames) {
        return Err(Error::validation(format!(
            "grid width {gw} not divisible into {n_frames} bands"
        )));
    }
    let bw = gw / n_frames;
    let x = tokens
        .reshape((b, gh, n_frames, bw, d))?
        .permute([0, 2, 1, 3, 4])? // (B, n, gh, bw, D)
        .contiguous()?
        .reshape((b, n_frames, gh * bw, d))?;
    Ok(x.mean(2)?)
}

/// Plain MLP head: linear layers with GELU between them, none after the last.
pub struct MlpHead {
    layers: Vec<Linear>,
}

impl MlpHead {
    /// `dims = [in, hidden, ..., out]` — one linear layer per adjacent pair.
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::validation("MlpHead needs at least [in, out] dims"));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| super::linear(params, &format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }
}

/// Scales rows to unit L2 norm along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// In-place momentum update `θ_k ← m·θ_k + (1−m)·θ_q` for every parameter
/// in `momentum`, matched by name against `online`. `momentum` may hold a
/// subset of `online`'s parameters, never the reverse.
pub fn ema_update(momentum: &ParamStore, online: &ParamStore, m: f64) -> Result<()> {
    if m.is_nan() || !(0.0..=1.0).contains(&m) {
        return Err(Error::validation(format!(
            "momentum coefficient {m} outside [0, 1]"
        )));
    }
    for (name, kvar) in momentum.named() {
        let qvar = online.get(name).map_err(|_| {
            Error::validation(format!("online parameters missing {name}"))
        })?;
        if kvar.shape() != qvar.shape() {
            return Err(Error::validation(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                kvar.shape(),
                qvar.shape()
            )));
        }
        let blended = (kvar.as_tensor().affine(m, 0.0)?
            + qvar.as_tensor().affine(1.0 - m, 0.0)?)?;
        kvar.set(&blended)?;
    }
    Ok(())
}

/// Positions of candidates whose codebook index differs from the anchor's —
/// the only candidates allowed as contrastive negatives.
pub fn filter_negatives(anchor_index: u32, candidate_indices: &[u32]) -> Vec<usize> {
    candidate_indices
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != anchor_index)
        .map(|(i, _)| i)
        .collect()
}

/// Picks the substituted positive from a same-index pool: uniformly among
/// the `min(5, len)` highest-similarity entries (ties broken toward the
/// lower position). Returns the pool position, or `None` for an empty pool.
pub fn select_positive(pool_similarities: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    if pool_similarities.is_empty() {
        return None;
    }
    let mut ranked: Vec<usize> = (0..pool_similarities.len()).collect();
    ranked.sort_by(|&a, &b| {
        pool_similarities[b]
            .partial_cmp(&pool_similarities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let k = ranked.len().min(TOP_K_POSITIVES);
    Some(ranked[rng.gen_range(0..k)])
}

/// The InfoNCE loss `−log( e^{q·k⁺/τ} / (e^{q·k⁺/τ} + Σᵢ e^{q·k⁻ᵢ/τ}) )`
/// for one query `q: (d,)`, positive `k_pos: (d,)`, and negatives `(K, d)`.
/// Similarities are raw dot products — callers normalize beforehand when
/// cosine similarity is intended. An empty negative set gives exactly 0.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    if tau.is_nan() || tau <= 0.0 || !tau.is_finite() {
        return Err(Error::validation(format!("temperature {tau} must be positive")));
    }
    let d = q.dims1()?;
    if k_pos.dims1()? != d {
        return Err(Error::validation("q and k_pos dimensions differ"));
    }
    let (k, dn) = negatives.dims2()?;
    if dn != d {
        return Err(Error::validation("negative dimensions differ from q"));
    }
    let pos = (q * k_pos)?.sum_all()?.reshape((1,))?;
    if k == 0 {
        return Ok((pos.clone() - pos)?.squeeze(0)?);
    }
    let neg = negatives.broadcast_mul(q)?.sum(1)?; // (K,)
    let z = (Tensor::cat(&[&neg, &pos], 0)? / tau)?; // (K+1,)
    let m = z.max_keepdim(0)?.detach();
    let lse = z
        .broadcast_sub(&m)?
        .exp()?
        .sum_keepdim(0)?
        .log()?
        .broadcast_add(&m)?;
    Ok(((lse - (pos / tau)?)?).squeeze(0)?)
}

/// One anchor's resolved contrastive partners inside a key set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPlan {
    /// Key column used as the positive.
    pub positive: usize,
    /// Key columns used as negatives (different codebook index, other images).
    pub negatives: Vec<usize>,
    /// True when no same-index frame existed in other images, so the
    /// positive fell back to the anchor's own augmented-view frame.
    pub fallback: bool,
}

/// Resolves positives and negatives for every anchor in a batch.
///
/// Anchor `a = i·8 + s` is slot `s` of image `i`. Candidate keys are all
/// frames of *other* images; keys sharing the anchor's codebook index are
/// removed from the negatives and form the substitution pool, from which
/// [`select_positive`] picks by similarity. `sims` is the row-major
/// `(B·8) × (B·8)` query–key similarity matrix.
pub fn plan_sid_batch(
    indices: &[[u32; N_SLOTS]],
    sims: &[f64],
    seed: u64,
) -> Result<Vec<AnchorPlan>> {
    let b = indices.len();
    let a_total = b * N_SLOTS;
    if sims.len() != a_total * a_total {
        return Err(Error::validation(format!(
            "similarity matrix has {} entries, expected {}",
            sims.len(),
            a_total * a_total
        )));
    }
    let flat: Vec<u32> = indices.iter().flatten().copied().collect();
    let mut plans = Vec::with_capacity(a_total);
    for a in 0..a_total {
        let own_image = a / N_SLOTS;
        let anchor_index = flat[a];
        let mut negatives = Vec::new();
        let mut pool = Vec::new(); // (column, similarity)
        for c in 0..a_total {
            if c / N_SLOTS == own_image {
                continue;
            }
            if flat[c] == anchor_index {
                pool.push((c, sims[a * a_total + c]));
            } else {
                negatives.push(c);
            }
        }
        let pool_sims: Vec<f64> = pool.iter().map(|&(_, s)| s).collect();
        let mut rng = seeded_rng(seed, "sid-positive", &[a as u64]);
        let (positive, fallback) = match select_positive(&pool_sims, &mut rng) {
            Some(p) => (pool[p].0, false),
            None => (a, true),
        };
        plans.push(AnchorPlan {
            positive,
            negatives,
            fallback,
        });
    }
    Ok(plans)
}

/// Batched contrastive loss with its bookkeeping counters.
pub struct SidOutcome {
    /// Mean InfoNCE loss over all `B·8` anchors (scalar tensor).
    pub loss: Tensor,
    /// Anchors whose positive was substituted from another image.
    pub substituted: usize,
    /// Anchors that fell back to their own augmented-view positive.
    pub fallback: usize,
}

/// Contrastive loss over a batch of frame embeddings.
///
/// `queries` and `keys` are `(B, 8, d)` — online-branch and momentum-branch
/// frames of the two augmented views. Both are L2-normalized here, and keys
/// are detached: no gradient flows through the momentum branch. `indices`
/// carries each image's eight codebook indices (from the un-augmented
/// image), `seed` drives positive substitution.
pub fn sid_loss(
    queries: &Tensor,
    keys: &Tensor,
    indices: &[[u32; N_SLOTS]],
    tau: f64,
    seed: u64,
) -> Result<SidOutcome> {
    if tau.is_nan() || tau <= 0.0 || !tau.is_finite() {
        return Err(Error::validation(format!("temperature {tau} must be positive")));
    }
    let (b, s, d) = queries.dims3()?;
    if s != N_SLOTS {
        return Err(Error::validation(format!("expected {N_SLOTS} slots, got {s}")));
    }
    if keys.dims3()? != (b, s, d) {
        return Err(Error::validation("query and key shapes differ"));
    }
    if indices.len() != b {
        return Err(Error::validation(format!(
            "{} index rows for batch of {b}",
            indices.len()
        )));
    }
    let a_total = b * N_SLOTS;
    let qn = l2_normalize(&queries.reshape((a_total, d))?)?;
    let kn = l2_normalize(&keys.reshape((a_total, d))?.detach())?;
    let logits = qn.matmul(&kn.t()?)?; // (A, A) cosine similarities

    let sims: Vec<f64> = logits
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let plans = plan_sid_batch(indices, &sims, seed)?;

    // Additive mask: 0 keeps a key as a negative, -1e30 removes it from the
    // denominator. The positive is appended as an extra column instead.
    let mut mask = vec![-1e30f64; a_total * a_total];
    let mut pos_onehot = vec![0f64; a_total * a_total];
    let mut substituted = 0;
    let mut fallback = 0;
    for (a, plan) in plans.iter().enumerate() {
        for &c in &plan.negatives {
            mask[a * a_total + c] = 0.0;
        }
        pos_onehot[a * a_total + plan.positive] = 1.0;
        if plan.fallback {
            fallback += 1;
        } else {
            substituted += 1;
        }
    }
    let device = queries.device();
    let dtype = queries.dtype();
    let mask = Tensor::from_vec(mask, (a_total, a_total), device)?.to_dtype(dtype)?;
    let pos_onehot = Tensor::from_vec(pos_onehot, (a_total, a_total), device)?.to_dtype(dtype)?;

    let z = (&logits / tau)?;
    let masked = (&z + mask)?;
    let pos = (&z * pos_onehot)?.sum_keepdim(1)?; // (A, 1)
    let zall = Tensor::cat(&[&masked, &pos], 1)?; // (A, A+1)
    let m = zall.max_keepdim(1)?.detach();
    let lse = zall
        .broadcast_sub(&m)?
        .exp()?
        .sum_keepdim(1)?
        .log()?
        .broadcast_add(&m)?;
    let loss = (lse - pos)?.mean_all()?;
    Ok(SidOutcome {
        loss,
        substituted,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = seeded_rng(seed, "contrast-test", &[]);
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(vals, shape, &dev()).unwrap()
    }

    #[test]
    // Index loops mirror the banded-mean formula; iterators obscure it.
    #[allow(clippy::needless_range_loop)]
    fn instance_map_matches_banded_mean_oracle() {
        let (b, gh, gw, d, n) = (2, 4, 8, 3, 4);
        let x = rand_tensor(&[b, gh * gw, d], 1, -1.0, 1.0);
        let frames = instance_map(&x, (gh, gw), n).unwrap();
        assert_eq!(frames.dims(), &[b, n, d]);
        let xs = x.to_vec3::<f64>().unwrap();
        let fs = frames.to_vec3::<f64>().unwrap();
        let bw = gw / n;
        for bi in 0..b {
            for fi in 0..n {
                for di in 0..d {
                    let mut sum = 0.0;
                    for r in 0..gh {
                        for c in fi * bw..(fi + 1) * bw {
                            sum += xs[bi][r * gw + c][di];
                        }
                    }
                    let want = sum / (gh * bw) as f64;
                    assert!(
                        (fs[bi][fi][di] - want).abs() < 1e-12,
                        "frame ({bi},{fi},{di}): {} vs {want}",
                        fs[bi][fi][di]
                    );
                }
            }
        }
    }

    #[test]
    fn instance_map_constant_tokens_give_constant_frames() {
        // 0.5 is dyadic: every partial sum and the final division are
        // exact in f32, so the mean reproduces the constant bit-for-bit.
        let x = Tensor::full(0.5f32, (1, 128, 4), &dev()).unwrap();
        let frames = instance_map(&x, (8, 16), 8).unwrap();
        for v in frames.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn instance_map_is_invariant_to_within_band_shuffles() {
        let (gh, gw, d) = (4, 8, 5);
        let x = rand_tensor(&[1, gh * gw, d], 3, -1.0, 1.0);
        let frames = instance_map(&x, (gh, gw), 4).unwrap();

        // Swap two tokens inside band 0 (columns 0 and 1 of row 0 and 2).
        let xs = x.to_vec3::<f64>().unwrap()[0].clone();
        let mut permuted = xs.clone();
        permuted.swap(gw, 2 * gw + 1); // (row 1, col 0) <-> (row 2, col 1)
        let xp = Tensor::from_vec(
            permuted.into_iter().flatten().collect::<Vec<f64>>(),
            (1, gh * gw, d),
            &dev(),
        )
        .unwrap();
        let frames_p = instance_map(&xp, (gh, gw), 4).unwrap();
        let a = frames.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = frames_p.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_map_rejects_bad_shapes() {
        let x = rand_tensor(&[1, 32, 4], 4, 0.0, 1.0);
        assert!(instance_map(&x, (4, 9), 4).is_err(), "grid mismatch");
        assert!(instance_map(&x, (4, 8), 3).is_err(), "bands must divide width");
        assert!(instance_map(&x, (4, 8), 0).is_err(), "zero bands");
    }

    #[test]
    fn mlp_head_shapes_and_layer_count() {
        let mut params = ParamStore::new(DType::F32, &dev());
        let mut rng = seeded_rng(5, "head", &[]);
        let head = MlpHead::new(&mut params, "proj", &[8, 16, 16, 4], &mut rng).unwrap();
        assert_eq!(params.len(), 6, "three layers, weight+bias each");
        let x = rand_tensor(&[2, 3, 8], 6, -1.0, 1.0).to_dtype(DType::F32).unwrap();
        let y = head.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 3, 4]);
        assert!(MlpHead::new(&mut params, "bad", &[8], &mut rng).is_err());
    }

    #[test]
    fn l2_normalize_gives_unit_rows() {
        let x = rand_tensor(&[4, 6], 7, -2.0, 2.0);
        let y = l2_normalize(&x).unwrap();
        for row in y.to_vec2::<f64>().unwrap() {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
        }
    }

    #[test]
    fn ema_update_matches_hand_arithmetic() {
        let mut momentum = ParamStore::new(DType::F64, &dev());
        let mut online = ParamStore::new(DType::F64, &dev());
        momentum
            .register("w", Tensor::full(1.0f64, (2,), &dev()).unwrap())
            .unwrap();
        online
            .register("w", Tensor::full(2.0f64, (2,), &dev()).unwrap())
            .unwrap();
        ema_update(&momentum, &online, 0.99).unwrap();
        for v in momentum.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap() {
            assert!((v - 1.01).abs() < 1e-12, "0.99·1 + 0.01·2 = 1.01, got {v}");
        }
    }

    #[test]
    fn ema_update_endpoints_copy_or_freeze() {
        let mk = |v: f64| {
            let mut p = ParamStore::new(DType::F64, &dev());
            p.register("w", Tensor::full(v, (3,), &dev()).unwrap()).unwrap();
            p
        };
        let momentum = mk(1.0);
        let online = mk(5.0);
        ema_update(&momentum, &online, 0.0).unwrap();
        assert_eq!(
            momentum.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap(),
            vec![5.0; 3],
            "m=0 copies the online parameters"
        );
        let momentum = mk(1.0);
        ema_update(&momentum, &online, 1.0).unwrap();
        assert_eq!(
            momentum.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap(),
            vec![1.0; 3],
            "m=1 freezes the momentum parameters"
        );
    }

    #[test]
    fn ema_update_rejects_mismatches() {
        let mut momentum = ParamStore::new(DType::F64, &dev());
        let mut online = ParamStore::new(DType::F64, &dev());
        momentum
            .register("w", Tensor::zeros((2,), DType::F64, &dev()).unwrap())
            .unwrap();
        assert!(ema_update(&momentum, &online, 0.5).is_err(), "missing name");
        online
            .register("w", Tensor::zeros((3,), DType::F64, &dev()).unwrap())
            .unwrap();
        assert!(ema_update(&momentum, &online, 0.5).is_err(), "shape mismatch");
        let online2 = {
            let mut p = ParamStore::new(DType::F64, &dev());
            p.register("w", Tensor::zeros((2,), DType::F64, &dev()).unwrap())
                .unwrap();
            p
        };
        assert!(ema_update(&momentum, &online2, -0.1).is_err(), "m below 0");
        assert!(ema_update(&momentum, &online2, 1.1).is_err(), "m above 1");
    }

    #[test]
    fn filter_negatives_keeps_only_different_indices() {
        assert_eq!(filter_negatives(7, &[7, 3, 7, 9]), vec![1, 3]);
        assert_eq!(filter_negatives(7, &[7, 7]), Vec::<usize>::new());
        assert_eq!(filter_negatives(7, &[]), Vec::<usize>::new());
        assert_eq!(filter_negatives(0, &[1, 2, 3]), vec![0, 1, 2]);
    }

    #[test]
    fn select_positive_samples_top_five_uniformly() {
        // Similarities 0.0, 0.1, ..., 0.9: top five are positions 9..5.
        let sims: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let mut counts = [0usize; 10];
        let draws = 1000;
        for i in 0..draws {
            let mut rng = seeded_rng(42, "mc-positive", &[i]);
            counts[select_positive(&sims, &mut rng).unwrap()] += 1;
        }
        for (pos, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            if pos >= 5 {
                assert!(
                    (freq - 0.2).abs() < 0.05,
                    "top-5 position {pos} frequency {freq} not within 0.2±0.05"
                );
            } else {
                assert_eq!(c, 0, "position {pos} is outside the top 5");
            }
        }
    }

    #[test]
    fn select_positive_handles_small_and_empty_pools() {
        let mut rng = seeded_rng(1, "small-pool", &[]);
        assert_eq!(select_positive(&[], &mut rng), None);
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..100 {
            let mut rng = seeded_rng(2, "small-pool", &[i]);
            seen.insert(select_positive(&[0.5, 0.1, 0.9], &mut rng).unwrap());
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn info_nce_matches_hand_computed_case() {
        // q·k⁺ = 1, two negatives at −1, τ = 1:
        // loss = ln(e + 2e⁻¹) − 1 ≈ 0.239523.
        let q = Tensor::from_vec(vec![1.0f64, 0.0], (2,), &dev()).unwrap();
        let k = Tensor::from_vec(vec![1.0f64, 0.0], (2,), &dev()).unwrap();
        let negs = Tensor::from_vec(vec![-1.0f64, 0.0, -1.0, 0.0], (2, 2), &dev()).unwrap();
        let loss = info_nce(&q, &k, &negs, 1.0).unwrap().to_scalar::<f64>().unwrap();
        let want = (1f64.exp() + 2.0 * (-1f64).exp()).ln() - 1.0;
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
        assert!((loss - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn info_nce_with_equal_similarities_is_ln_k_plus_one() {
        let q = Tensor::from_vec(vec![0.6f64, 0.8], (2,), &dev()).unwrap();
        let k = q.clone();
        for kn in [1usize, 4, 15] {
            let negs = q
                .reshape((1, 2))
                .unwrap()
                .broadcast_as((kn, 2))
                .unwrap()
                .contiguous()
                .unwrap();
            let loss = info_nce(&q, &k, &negs, 0.3).unwrap().to_scalar::<f64>().unwrap();
            let want = ((kn + 1) as f64).ln();
            assert!((loss - want).abs() < 1e-12, "K={kn}: {loss} vs {want}");
        }
    }

    #[test]
    fn info_nce_zero_for_empty_negatives_and_monotone_in_positive() {
        let q = rand_tensor(&[4], 8, -1.0, 1.0);
        let empty = Tensor::zeros((0, 4), DType::F64, &dev()).unwrap();
        let k = rand_tensor(&[4], 9, -1.0, 1.0);
        let zero = info_nce(&q, &k, &empty, 0.2).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(zero, 0.0);

        let negs = rand_tensor(&[3, 4], 10, -1.0, 1.0);
        let mut prev = f64::INFINITY;
        for scale in [0.5, 1.0, 2.0] {
            let kp = (k.clone() * scale).unwrap();
            let loss = info_nce(&q, &kp, &negs, 0.2).unwrap().to_scalar::<f64>().unwrap();
            // k scaled along a direction with positive q·k strictly raises
            // q·k⁺ when q·k > 0; flip q·k sign first if needed.
            let qk = (q.clone() * k.clone()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            if qk > 0.0 {
                assert!(loss < prev, "loss must strictly decrease as q·k⁺ grows");
            }
            prev = loss;
        }
        assert!(info_nce(&q, &k, &negs, 0.0).is_err());
        assert!(info_nce(&q, &k, &negs, f64::NAN).is_err());
    }

    fn synthetic_indices(b: usize, seed: u64, n_codes: u32) -> Vec<[u32; N_SLOTS]> {
        let mut rng = seeded_rng(seed, "sid-indices", &[]);
        (0..b)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0..n_codes)))
            .collect()
    }

    #[test]
    fn plan_sid_batch_never_uses_own_image_or_same_index() {
        for trial in 0..10u64 {
            let b = 4;
            // Few codes force plenty of collisions.
            let indices = synthetic_indices(b, trial, 3);
            let flat: Vec<u32> = indices.iter().flatten().copied().collect();
            let a_total = b * N_SLOTS;
            let mut rng = seeded_rng(trial, "sid-sims", &[]);
            let sims: Vec<f64> = (0..a_total * a_total).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let plans = plan_sid_batch(&indices, &sims, trial).unwrap();
            assert_eq!(plans.len(), a_total);
            for (a, plan) in plans.iter().enumerate() {
                let own = a / N_SLOTS;
                for &c in &plan.negatives {
                    assert_ne!(c / N_SLOTS, own, "negative from the anchor's own image");
                    assert_ne!(flat[c], flat[a], "negative shares the anchor's index");
                }
                if plan.fallback {
                    assert_eq!(plan.positive, a, "fallback must be the anchor's own frame");
                } else {
                    assert_ne!(plan.positive / N_SLOTS, own);
                    assert_eq!(flat[plan.positive], flat[a]);
                }
            }
        }
    }

    #[test]
    fn plan_sid_batch_falls_back_on_unique_indices() {
        // Give every frame a globally unique index: all pools are empty.
        let b = 2;
        let indices: Vec<[u32; N_SLOTS]> = (0..b)
            .map(|i| std::array::from_fn(|s| (i * N_SLOTS + s) as u32))
            .collect();
        let a_total = b * N_SLOTS;
        let sims = vec![0.0; a_total * a_total];
        let plans = plan_sid_batch(&indices, &sims, 0).unwrap();
        for (a, plan) in plans.iter().enumerate() {
            assert!(plan.fallback);
            assert_eq!(plan.positive, a);
            assert_eq!(plan.negatives.len(), (b - 1) * N_SLOTS);
        }
    }

    #[test]
    fn sid_loss_matches_host_oracle() {
        let b = 3;
        let indices = synthetic_indices(b, 5, 4);
        let queries = rand_tensor(&[b, N_SLOTS, 6], 6, -1.0, 1.0);
        let keys = rand_tensor(&[b, N_SLOTS, 6], 7, -1.0, 1.0);
        let tau = 0.2;
        let out = sid_loss(&queries, &keys, &indices, tau, 11).unwrap();
        let got = out.loss.to_scalar::<f64>().unwrap();

        // Host recomputation from normalized rows and the same plans.
        let a_total = b * N_SLOTS;
        let norm_rows = |t: &Tensor| -> Vec<Vec<f64>> {
            t.reshape((a_total, 6))
                .unwrap()
                .to_vec2::<f64>()
                .unwrap()
                .into_iter()
                .map(|row| {
                    let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-12;
                    row.into_iter().map(|v| v / n).collect()
                })
                .collect()
        };
        let qn = norm_rows(&queries);
        let kn = norm_rows(&keys);
        let mut sims = vec![0.0; a_total * a_total];
        for a in 0..a_total {
            for c in 0..a_total {
                sims[a * a_total + c] = qn[a].iter().zip(&kn[c]).map(|(x, y)| x * y).sum();
            }
        }
        let plans = plan_sid_batch(&indices, &sims, 11).unwrap();
        let mut want = 0.0;
        for (a, plan) in plans.iter().enumerate() {
            let pos = sims[a * a_total + plan.positive] / tau;
            let mut denom = pos.exp();
            for &c in &plan.negatives {
                denom += (sims[a * a_total + c] / tau).exp();
            }
            want += denom.ln() - pos;
        }
        want /= a_total as f64;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert_eq!(out.substituted + out.fallback, a_total);
    }

    #[test]
    fn sid_loss_is_zero_when_every_frame_shares_one_index() {
        // No valid negatives anywhere: every anchor's loss is −log(1) = 0.
        let b = 3;
        let indices = vec![[7u32; N_SLOTS]; b];
        let queries = rand_tensor(&[b, N_SLOTS, 5], 8, -1.0, 1.0);
        let keys = rand_tensor(&[b, N_SLOTS, 5], 9, -1.0, 1.0);
        let out = sid_loss(&queries, &keys, &indices, 0.2, 3).unwrap();
        let loss = out.loss.to_scalar::<f64>().unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
        assert_eq!(out.fallback, 0, "pools are never empty here");
    }

    #[test]
    fn sid_loss_blocks_gradients_through_keys() {
        let b = 2;
        let indices = synthetic_indices(b, 1, 3);
        let q = Var::from_tensor(&rand_tensor(&[b, N_SLOTS, 4], 2, -1.0, 1.0)).unwrap();
        let k = Var::from_tensor(&rand_tensor(&[b, N_SLOTS, 4], 3, -1.0, 1.0)).unwrap();
        let out = sid_loss(q.as_tensor(), k.as_tensor(), &indices, 0.2, 0).unwrap();
        let grads = out.loss.backward().unwrap();
        assert!(grads.get(q.as_tensor()).is_some(), "queries must receive gradient");
        assert!(grads.get(k.as_tensor()).is_none(), "keys must be detached");
    }
}
