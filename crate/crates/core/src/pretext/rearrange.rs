//! Strip-rearrangement task with index-aware label relaxation.
//!
//! An image is cut into `n` equal-width vertical strips which are shuffled.
//! A Mixer head over per-strip features predicts, for each position, which
//! original strip sits there. Because strips with equal codebook indices
//! look interchangeable, every labeling that permutes such strips among
//! themselves is accepted: the loss is the minimum cross-entropy over the
//! whole valid set.

use candle_core::{D, Tensor};
use candle_nn::{Linear, Module};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::params::ParamStore;

use super::vit::LayerNorm;

/// Upper bound on how many valid labelings are enumerated per image.
pub const VALID_ORDER_CAP: usize = 64;

/// Draws a uniformly random strip order. `order[k]` is the original strip
/// placed at position `k`; the identity order is a legal draw.
pub fn make_permutation(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::validation("cannot permute zero strips"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order)
}

/// Rebuilds `(B, 3, H, W)` images with their vertical strips rearranged,
/// one order per image. Position `k` of the output holds strip `order[k]`
/// of the input; all orders must be permutations of the same length, and
/// `W` must divide evenly into that many strips.
pub fn shuffle_strips(images: &Tensor, orders: &[Vec<usize>]) -> Result<Tensor> {
    let (b, _, _, w) = images.dims4()?;
    if orders.len() != b {
        return Err(Error::validation(format!(
            "{} strip orders for batch of {b}",
            orders.len()
        )));
    }
    let mut rows = Vec::with_capacity(b);
    for (i, order) in orders.iter().enumerate() {
        let n = order.len();
        validate_permutation(order, n)?;
        if n == 0 || !w.is_multiple_of(n) {
            return Err(Error::validation(format!(
                "width {w} not divisible into {n} strips"
            )));
        }
        let sw = w / n;
        let mut cols = Vec::with_capacity(w);
        for &src in order {
            for j in 0..sw {
                cols.push((src * sw + j) as u32);
            }
        }
        let idx = Tensor::from_vec(cols, (w,), images.device())?;
        rows.push(images.narrow(0, i, 1)?.index_select(&idx, 3)?);
    }
    Ok(Tensor::cat(&rows.iter().collect::<Vec<_>>(), 0)?)
}

fn validate_permutation(order: &[usize], n: usize) -> Result<()> {
    if order.len() != n {
        return Err(Error::validation(format!(
            "order length {} does not match {n} strips",
            order.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in order {
        if p >= n || seen[p] {
            return Err(Error::validation(format!(
                "order {order:?} is not a permutation of 0..{n}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// All labelings consistent with the strips' codebook indices, capped at
/// [`VALID_ORDER_CAP`] entries.
///
/// A labeling `L` is valid when it is a bijection and strip `L[k]` has the
/// same codebook index as the strip truly at position `k` (`order[k]`),
/// for every position. The full set has `Π (multiplicity!)` members over
/// the index multiset. Enumeration is lexicographic; when the cap cuts it
/// short, the true labeling replaces the last entry if it was not already
/// enumerated, so it is always a member.
pub fn valid_orders(portion_indices: &[u32], order: &[usize]) -> Result<Vec<Vec<usize>>> {
    valid_orders_capped(portion_indices, order, VALID_ORDER_CAP)
}

/// [`valid_orders`] with an explicit cap (must be ≥ 1).
pub fn valid_orders_capped(
    portion_indices: &[u32],
    order: &[usize],
    cap: usize,
) -> Result<Vec<Vec<usize>>> {
    let n = portion_indices.len();
    if n == 0 {
        return Err(Error::validation("no portions to label"));
    }
    if cap == 0 {
        return Err(Error::validation("cap must be at least 1"));
    }
    validate_permutation(order, n)?;

    // Lexicographic backtracking: at each position try unused strips with
    // the required index, in ascending order.
    struct Search<'a> {
        z: &'a [u32],
        order: &'a [usize],
        cap: usize,
        used: Vec<bool>,
        current: Vec<usize>,
        out: Vec<Vec<usize>>,
    }
    impl Search<'_> {
        fn go(&mut self, k: usize) {
            if self.out.len() == self.cap {
                return;
            }
            if k == self.order.len() {
                self.out.push(self.current.clone());
                return;
            }
            let want = self.z[self.order[k]];
            for p in 0..self.order.len() {
                if !self.used[p] && self.z[p] == want {
                    self.used[p] = true;
                    self.current.push(p);
                    self.go(k + 1);
                    self.current.pop();
                    self.used[p] = false;
                    if self.out.len() == self.cap {
                        return;
                    }
                }
            }
        }
    }
    let mut search = Search {
        z: portion_indices,
        order,
        cap,
        used: vec![false; n],
        current: Vec::with_capacity(n),
        out: Vec::new(),
    };
    search.go(0);
    let mut result = search.out;
    if !result.iter().any(|l| l == order) {
        let last = result.len() - 1;
        result[last] = order.to_vec();
    }
    Ok(result)
}

/// Two-layer Mixer over per-strip features, then an `n`-way classifier per
/// position. Each Mixer layer is a token-mixing MLP (across the `n` strips)
/// followed by a channel-mixing MLP (across the feature width), both
/// two-layer GELU MLPs with residual connections and pre-layer-norm.
pub struct MixerRankHead {
    layers: Vec<MixerLayer>,
    classifier: Linear,
    n: usize,
    dim: usize,
}

struct MixerLayer {
    ln1: LayerNorm,
    token_fc1: Linear,
    token_fc2: Linear,
    ln2: LayerNorm,
    chan_fc1: Linear,
    chan_fc2: Linear,
}

impl MixerLayer {
    fn new(
        params: &mut ParamStore,
        name: &str,
        n: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        // Standard Mixer hidden widths: 4x expansion on both axes.
        let (th, ch) = (4 * n, 4 * dim);
        Ok(Self {
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim)?,
            token_fc1: super::linear(params, &format!("{name}.token_fc1"), n, th, rng)?,
            token_fc2: super::linear(params, &format!("{name}.token_fc2"), th, n, rng)?,
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim)?,
            chan_fc1: super::linear(params, &format!("{name}.chan_fc1"), dim, ch, rng)?,
            chan_fc2: super::linear(params, &format!("{name}.chan_fc2"), ch, dim, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Token mixing operates on (B, D, n) rows.
        let t = self.ln1.forward(x)?.transpose(1, 2)?.contiguous()?;
        let t = self.token_fc2.forward(&self.token_fc1.forward(&t)?.gelu()?)?;
        let x = (x + t.transpose(1, 2)?.contiguous()?)?;
        let c = self.ln2.forward(&x)?;
        let c = self.chan_fc2.forward(&self.chan_fc1.forward(&c)?.gelu()?)?;
        Ok((&x + c)?)
    }
}

impl MixerRankHead {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        n: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::validation("Mixer head needs nonzero strip count and width"));
        }
        let layers = (0..2)
            .map(|i| MixerLayer::new(params, &format!("{name}.layer{i}"), n, dim, rng))
            .collect::<Result<Vec<_>>>()?;
        let classifier = super::linear(params, &format!("{name}.classifier"), dim, n, rng)?;
        Ok(Self {
            layers,
            classifier,
            n,
            dim,
        })
    }

    /// `(B, n, dim)` strip features → `(B, n, n)` logits; row `k` scores
    /// which original strip sits at position `k`.
    pub fn forward(&self, strips: &Tensor) -> Result<Tensor> {
        let (_, n, d) = strips.dims3()?;
        if n != self.n || d != self.dim {
            return Err(Error::validation(format!(
                "expected (B, {}, {}) strip features, got (B, {n}, {d})",
                self.n, self.dim
            )));
        }
        let mut x = strips.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(self.classifier.forward(&x)?)
    }
}

/// Minimum cross-entropy over the valid labelings: for `(n, n)` logits and
/// each valid `L`, the per-position cross-entropy `−mean_k log p(L[k] | k)`
/// is evaluated, and the smallest one (first wins ties) is returned as a
/// differentiable scalar.
pub fn rtr_loss(logits: &Tensor, valid: &[Vec<usize>]) -> Result<Tensor> {
    let (n, n2) = logits.dims2()?;
    if n != n2 {
        return Err(Error::validation(format!("logits must be square, got ({n}, {n2})")));
    }
    if valid.is_empty() {
        return Err(Error::validation("no valid labelings supplied"));
    }
    for l in valid {
        validate_permutation(l, n)?;
    }
    let log_probs = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let host: Vec<Vec<f64>> = log_probs
        .detach()
        .to_dtype(candle_core::DType::F64)?
        .to_vec2::<f64>()?;
    let ce = |l: &[usize]| -> f64 {
        -l.iter().enumerate().map(|(k, &p)| host[k][p]).sum::<f64>() / n as f64
    };
    let mut best = 0usize;
    for (i, l) in valid.iter().enumerate() {
        if ce(l) < ce(&valid[best]) {
            best = i;
        }
    }
    let mut onehot = vec![0f64; n * n];
    for (k, &p) in valid[best].iter().enumerate() {
        onehot[k * n + p] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, n), logits.device())?.to_dtype(logits.dtype())?;
    let picked = (log_probs * onehot)?.sum_all()?;
    Ok(picked.affine(-1.0 / n as f64, 0.0)?)
}
