//! AdamW with decoupled weight decay, bias correction, optional global
//! gradient-norm clipping, and serializable state for bit-exact resume.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::util::store::TensorStore;

/// Optimizer hyperparameters. The learning rate is passed per step so that
/// schedules stay outside the optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// AdamW over a fixed, name-ordered parameter list.
///
/// Update per parameter θ with gradient g (optionally pre-scaled by the
/// clip factor):
///
/// ```text
/// m ← β₁·m + (1−β₁)·g            v ← β₂·v + (1−β₂)·g²
/// m̂ = m / (1−β₁ᵗ)                v̂ = v / (1−β₂ᵗ)
/// θ ← θ − lr·( m̂ / (√v̂ + ε) + weight_decay·θ )
/// ```
pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    slots: Vec<Slot>,
}

impl AdamW {
    /// Builds the optimizer over `(name, var)` pairs; pairs must already be
    /// in a deterministic order (e.g. from `ParamStore::named`).
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let slots = params
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            step_count: 0,
            slots,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// L2 norm over all gradients present in `grads`, computed in f64.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0f64;
        for s in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                total += g
                    .to_dtype(candle_core::DType::F64)?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update with learning rate `lr`. If `max_grad_norm` is set and the
    /// global norm exceeds it, all gradients are scaled down to that norm.
    /// Returns the pre-clip gradient norm.
    pub fn step(
        &mut self,
        grads: &GradStore,
        lr: f64,
        max_grad_norm: Option<f64>,
    ) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("gradient norm is {norm}")));
        }
        let scale = match max_grad_norm {
            Some(maxn) if norm > maxn => maxn / norm,
            _ => 1.0,
        };
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else {
                continue; // Parameter untouched this step: state unchanged.
            };
            let g = (g * scale)?;
            s.m = ((&s.m * self.cfg.beta1)? + (&g * (1.0 - self.cfg.beta1))?)?;
            s.v = ((&s.v * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let m_hat = (&s.m / bc1)?;
            let v_hat = (&s.v / bc2)?;
            let adaptive = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let decay = (s.var.as_tensor() * self.cfg.weight_decay)?;
            let update = ((adaptive + decay)? * lr)?;
            s.var.set(&(s.var.as_tensor() - update)?)?;
        }
        Ok(norm)
    }

    /// Serializes moment buffers and the step counter under `prefix`.
    pub fn export(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        store.set_meta(&format!("{prefix}.step_count"), self.step_count);
        for s in &self.slots {
            store.insert(&format!("{prefix}.m.{}", s.name), &s.m)?;
            store.insert(&format!("{prefix}.v.{}", s.name), &s.v)?;
        }
        Ok(())
    }

    /// Restores state exported by [`export`]; parameter names must match.
    pub fn import(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        self.step_count = store.meta_u64(&format!("{prefix}.step_count"))?;
        for s in &mut self.slots {
            let device = s.m.device().clone();
            let dtype = s.m.dtype();
            s.m = store
                .to_tensor(&format!("{prefix}.m.{}", s.name), &device)?
                .to_dtype(dtype)?;
            s.v = store
                .to_tensor(&format!("{prefix}.v.{}", s.name), &device)?
                .to_dtype(dtype)?;
        }
        Ok(())
    }
}
