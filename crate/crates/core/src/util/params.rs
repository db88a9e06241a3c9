//! Named trainable-parameter registry.
//!
//! Parameters are [`Var`]s keyed by a stable dotted name in a sorted map, so
//! optimizer iteration order, serialization, and content hashing are all
//! deterministic. Initial values are drawn from caller-provided seeded
//! generators (never from ambient randomness), which keeps model
//! construction reproducible from a seed alone.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::util::store::{sha256_hex, TensorStore};

/// Sorted name → [`Var`] registry for one model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers `values` (converted to the store dtype) under `name` and
    /// returns the live tensor handle to build layers from.
    pub fn register(&mut self, name: &str, values: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::validation(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&values.to_dtype(self.dtype)?)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    fn tensor_from_f64(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?)
    }

    /// Uniform init in `[lo, hi)`.
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        let t = self.tensor_from_f64(values, shape)?;
        self.register(name, t)
    }

    /// Gaussian init with the given mean and standard deviation.
    pub fn normal(
        &mut self,
        name: &str,
        shape: &[usize],
        mean: f64,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            })
            .collect();
        let t = self.tensor_from_f64(values, shape)?;
        self.register(name, t)
    }

    /// He/Kaiming-style init: normal with std `sqrt(2 / fan_in)` where
    /// `fan_in` is the product of all dimensions after the first.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        self.normal(name, shape, 0.0, (2.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.register(name, t)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::ones(shape, self.dtype, &self.device)?;
        self.register(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::validation(format!("no parameter named {name}")))
    }

    /// `(name, var)` pairs in sorted name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Dumps all parameters into `store` under `prefix.name`.
    pub fn export(&self, store: &mut TensorStore, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            store.insert(&format!("{prefix}.{name}"), var.as_tensor())?;
        }
        Ok(())
    }

    /// Overwrites every registered parameter from `store`. All names must
    /// be present with matching shapes; extra prefixed names in the store
    /// are an error (they indicate a model/file mismatch).
    pub fn import(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        let full = format!("{prefix}.");
        let mut expected: usize = 0;
        for (name, var) in &self.vars {
            let t = store.to_tensor(&format!("{prefix}.{name}"), &self.device)?;
            if t.dims() != var.dims() {
                return Err(Error::format(format!(
                    "parameter {name}: stored shape {:?} does not match model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
            expected += 1;
        }
        let present = store.names().filter(|n| n.starts_with(&full)).count();
        if present != expected {
            return Err(Error::format(format!(
                "store holds {present} tensors under {prefix}, model expects {expected}"
            )));
        }
        Ok(())
    }

    /// Hash of all parameter values; stable across save/load round trips.
    pub fn content_hash(&self) -> Result<String> {
        let mut store = TensorStore::new();
        self.export(&mut store, "p")?;
        Ok(sha256_hex(&store.to_bytes()))
    }
}
