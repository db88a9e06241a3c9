//! Nearest-neighbor quantization against the codebook, with
//! straight-through gradients.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Result of quantizing a `(B, P, D)` content tensor.
pub struct QuantizedResult {
    /// Selected codebook indices, flattened row-major over `(B, P)`.
    pub z: Vec<u32>,
    /// Indices as a `(B, P)` u32 tensor.
    pub z_tensor: Tensor,
    /// Exact embedding rows `(B, P, D)`; gradients flow to the codebook.
    pub x_q: Tensor,
    /// `x_c + (x_q − x_c).detach()`: numerically the quantized value, but
    /// the backward pass copies the decoder's gradient to `x_c` unchanged.
    pub straight_through: Tensor,
}

/// Index of the nearest codebook row for every `(image, position)` cell.
///
/// Distances are squared Euclidean, accumulated sequentially in f64 over
/// the feature dimension; ties resolve to the lowest index (strict `<`
/// comparison). This scalar scan is the reference semantics — the oracle
/// in the acceptance suite re-implements exactly this rule.
pub fn nearest_indices(x_c: &Tensor, embeddings: &Tensor) -> Result<Vec<u32>> {
    let (b, p, d) = x_c.dims3()?;
    let (n, de) = embeddings.dims2()?;
    if n == 0 {
        return Err(Error::config("codebook is empty"));
    }
    if de != d {
        return Err(Error::validation(format!(
            "content dim {d} != codebook dim {de}"
        )));
    }
    let x = x_c
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let e = embeddings
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::validation(format!(
                "content vector component {i} is {v}"
            )));
        }
    }
    let mut out = Vec::with_capacity(b * p);
    for row in 0..b * p {
        let xr = &x[row * d..(row + 1) * d];
        let mut best = f64::INFINITY;
        let mut best_idx = 0u32;
        for (k, er) in e.chunks_exact(d).enumerate() {
            let mut dist = 0.0f64;
            for (xi, ei) in xr.iter().zip(er) {
                let diff = xi - ei;
                dist += diff * diff;
            }
            if dist < best {
                best = dist;
                best_idx = k as u32;
            }
        }
        out.push(best_idx);
    }
    Ok(out)
}

/// Quantizes `x_c` `(B, P, D)` against `embeddings` `(N, D)`.
pub fn quantize(x_c: &Tensor, embeddings: &Tensor) -> Result<QuantizedResult> {
    let (b, p, d) = x_c.dims3()?;
    let z = nearest_indices(x_c, embeddings)?;
    let flat = Tensor::from_vec(z.clone(), b * p, x_c.device())?;
    let x_q = embeddings.index_select(&flat, 0)?.reshape((b, p, d))?;
    let straight_through = ((&x_q - x_c)?.detach() + x_c)?;
    let z_tensor = flat.reshape((b, p))?;
    Ok(QuantizedResult {
        z,
        z_tensor,
        x_q,
        straight_through,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(vals: Vec<f32>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(vals, shape, &Device::Cpu).unwrap()
    }

    fn emb(vals: Vec<f32>, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(vals, (n, d), &Device::Cpu).unwrap()
    }

    #[test]
    fn picks_the_closer_embedding() {
        // distances: to e0 = sqrt(2), to e1 = sqrt(13)
        let e = emb(vec![0.0, 0.0, 3.0, 4.0], 2, 2);
        let x = t(vec![1.0, 1.0], (1, 1, 2));
        assert_eq!(nearest_indices(&x, &e).unwrap(), vec![0]);
    }

    #[test]
    fn exact_match_returns_that_row() {
        let d = 3;
        let vals: Vec<f32> = (0..8 * d).map(|i| (i as f32).sin()).collect();
        let e = emb(vals.clone(), 8, d);
        let x = t(vals[5 * d..6 * d].to_vec(), (1, 1, d));
        let q = quantize(&x, &e).unwrap();
        assert_eq!(q.z, vec![5]);
        let xq = q.x_q.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(xq, vals[5 * d..6 * d].to_vec());
    }

    #[test]
    fn ties_break_to_the_lowest_index() {
        let e = emb(vec![1.0, 0.0, -1.0, 0.0], 2, 2);
        let x = t(vec![0.0, 0.0], (1, 1, 2));
        assert_eq!(nearest_indices(&x, &e).unwrap(), vec![0]);
        // Duplicate embeddings: still the lowest of the duplicates.
        let e2 = emb(vec![0.5, 0.5, 0.2, 0.2, 0.2, 0.2], 3, 2);
        let x2 = t(vec![0.2, 0.2], (1, 1, 2));
        assert_eq!(nearest_indices(&x2, &e2).unwrap(), vec![1]);
    }

    #[test]
    fn empty_codebook_is_a_config_error() {
        let e = Tensor::zeros((0, 2), DType::F32, &Device::Cpu).unwrap();
        let x = t(vec![0.0, 0.0], (1, 1, 2));
        assert!(matches!(nearest_indices(&x, &e), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_content_is_rejected() {
        let e = emb(vec![0.0, 0.0], 1, 2);
        let x = t(vec![f32::NAN, 0.0], (1, 1, 2));
        assert!(nearest_indices(&x, &e).is_err());
    }

    #[test]
    fn quantization_is_idempotent() {
        use rand::Rng;
        let mut rng = crate::util::rng::seeded_rng(3, "idem", &[]);
        let d = 6;
        let e_vals: Vec<f32> = (0..32 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = emb(e_vals, 32, d);
        let x_vals: Vec<f32> = (0..2 * 8 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(x_vals, (2, 8, d));
        let q1 = quantize(&x, &e).unwrap();
        let q2 = quantize(&q1.x_q, &e).unwrap();
        assert_eq!(q1.z, q2.z);
    }

    #[test]
    fn straight_through_copies_decoder_gradient_to_content() {
        // For each case: run a nonlinear head on the straight-through value
        // and on a leaf tensor holding the same value. The gradient x_c
        // receives must equal the leaf's gradient bit for bit, because the
        // straight-through add contributes identity backward.
        use rand::Rng;
        for case in 0..10u64 {
            let mut rng = crate::util::rng::seeded_rng(case, "st", &[]);
            let d = 4;
            let e_vals: Vec<f32> = (0..8 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e = emb(e_vals, 8, d);
            let x_vals: Vec<f32> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x_var = Var::from_tensor(&t(x_vals, (1, 3, d))).unwrap();
            let q = quantize(x_var.as_tensor(), &e).unwrap();

            let head = |v: &Tensor| -> Tensor {
                let w = Tensor::from_vec(
                    (0..d).map(|i| 0.3 + i as f32 * 0.1).collect::<Vec<_>>(),
                    (d,),
                    &Device::Cpu,
                )
                .unwrap();
                v.broadcast_mul(&w)
                    .unwrap()
                    .tanh()
                    .unwrap()
                    .sqr()
                    .unwrap()
                    .sum_all()
                    .unwrap()
            };

            let grads_st = head(&q.straight_through).backward().unwrap();
            let g_content = grads_st
                .get(x_var.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();

            let leaf = Var::from_tensor(&q.straight_through.detach()).unwrap();
            let grads_leaf = head(leaf.as_tensor()).backward().unwrap();
            let g_decoder = grads_leaf
                .get(leaf.as_tensor())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();

            for (a, b) in g_content.iter().zip(&g_decoder) {
                assert_eq!(a.to_bits(), b.to_bits(), "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn straight_through_does_not_leak_gradient_to_the_codebook() {
        let e_var = Var::from_tensor(&emb(vec![0.1, 0.2, 0.3, 0.4], 2, 2)).unwrap();
        let x = t(vec![0.09, 0.21], (1, 1, 2));
        let q = quantize(&x, e_var.as_tensor()).unwrap();
        let loss = q.straight_through.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(
            grads.get(e_var.as_tensor()).is_none(),
            "straight-through path must not backprop into embeddings"
        );
        // The x_q path, by contrast, does reach the codebook.
        let q2 = quantize(&x, e_var.as_tensor()).unwrap();
        let loss2 = q2.x_q.sqr().unwrap().sum_all().unwrap();
        let grads2 = loss2.backward().unwrap();
        assert!(grads2.get(e_var.as_tensor()).is_some());
    }
}
