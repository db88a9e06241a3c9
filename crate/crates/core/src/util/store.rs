//! Deterministic named-tensor container used for model checkpoints and the
//! codebook file's parameter blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8  b"LEGO-TS1"
//! meta    u32 count, then per entry (sorted by key):
//!           u32 key len, key bytes, u32 value len, value bytes
//! tensors u32 count, then per entry (sorted by name):
//!           u32 name len, name bytes,
//!           u8 dtype (0 = f32, 1 = f64),
//!           u32 rank, u64 dim per axis,
//!           f32 or f64 data (row-major)
//! digest  32  sha256 over everything above
//! ```
//!
//! Entries are iterated in sorted order and floats are written as their raw
//! bit patterns, so serializing the same logical state twice yields
//! byte-identical files — the property the bit-exact resume check relies on.
//! f64 tensors round-trip losslessly (optimizer state and the float64 test
//! models depend on this).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LEGO-TS1";

/// Raw tensor payload, preserving the source precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 regardless of storage precision.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

/// One stored tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// Sorted map of named tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores a tensor under `name`. f64 tensors keep full precision;
    /// everything else is stored as f32.
    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let dims = tensor.dims().to_vec();
        let data = match tensor.dtype() {
            DType::F64 => TensorData::F64(tensor.flatten_all()?.to_vec1::<f64>()?),
            _ => TensorData::F32(
                tensor
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?,
            ),
        };
        self.insert_entry(name, dims, data)
    }

    /// Stores raw f32 data with an explicit shape.
    pub fn insert_raw(&mut self, name: &str, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.insert_entry(name, dims, TensorData::F32(data))
    }

    fn insert_entry(&mut self, name: &str, dims: Vec<usize>, data: TensorData) -> Result<()> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::validation(format!(
                "tensor {name}: shape {dims:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        self.tensors
            .insert(name.to_string(), TensorEntry { dims, data });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    /// Rebuilds a tensor on `device` in its stored precision, erroring if
    /// the name is missing.
    pub fn to_tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let e = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::format(format!("store has no tensor named {name}")))?;
        let t = match &e.data {
            TensorData::F32(v) => Tensor::from_vec(v.clone(), e.dims.as_slice(), device)?,
            TensorData::F64(v) => Tensor::from_vec(v.clone(), e.dims.as_slice(), device)?,
        };
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta(key)
            .ok_or_else(|| Error::format(format!("store has no meta key {key}")))?
            .parse()
            .map_err(|e| Error::format(format!("meta {key} is not an integer: {e}")))
    }

    /// Stores an f64 exactly via its bit pattern.
    pub fn set_meta_f64(&mut self, key: &str, value: f64) {
        self.meta
            .insert(key.to_string(), format!("{:016x}", value.to_bits()));
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::format(format!("store has no meta key {key}")))?;
        let bits = u64::from_str_radix(raw, 16)
            .map_err(|e| Error::format(format!("meta {key} is not an f64 bit pattern: {e}")))?;
        Ok(f64::from_bits(bits))
    }

    /// Serializes to bytes, including the sha256 trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            buf.extend_from_slice(&(k.len() as u32).to_le_bytes());
            buf.extend_from_slice(k.as_bytes());
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            buf.extend_from_slice(v.as_bytes());
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, e) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(match e.data {
                TensorData::F32(_) => 0,
                TensorData::F64(_) => 1,
            });
            buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    /// Parses bytes produced by [`to_bytes`], verifying the digest.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return Err(Error::format("tensor store truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expect = Sha256::digest(body);
        if digest != expect.as_slice() {
            return Err(Error::format("tensor store digest mismatch (corrupt file)"));
        }
        let mut r = body;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("tensor store magic mismatch"));
        }
        let mut store = Self::new();
        let meta_count = read_u32(&mut r)?;
        for _ in 0..meta_count {
            let k = read_string(&mut r)?;
            let v = read_string(&mut r)?;
            store.meta.insert(k, v);
        }
        let tensor_count = read_u32(&mut r)?;
        for _ in 0..tensor_count {
            let name = read_string(&mut r)?;
            let mut dtype = [0u8; 1];
            read_exact(&mut r, &mut dtype)?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = dims.iter().product();
            let data = match dtype[0] {
                0 => {
                    let mut v = vec![0f32; numel];
                    for x in &mut v {
                        let mut b = [0u8; 4];
                        read_exact(&mut r, &mut b)?;
                        *x = f32::from_le_bytes(b);
                    }
                    TensorData::F32(v)
                }
                1 => {
                    let mut v = vec![0f64; numel];
                    for x in &mut v {
                        let mut b = [0u8; 8];
                        read_exact(&mut r, &mut b)?;
                        *x = f64::from_le_bytes(b);
                    }
                    TensorData::F64(v)
                }
                d => return Err(Error::format(format!("unknown tensor dtype tag {d}"))),
            };
            store.tensors.insert(name, TensorEntry { dims, data });
        }
        if !r.is_empty() {
            return Err(Error::format(format!(
                "tensor store has {} trailing bytes",
                r.len()
            )));
        }
        Ok(store)
    }

    /// Writes atomically: serialize to `<path>.tmp`, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Writes `bytes` to `path` via a sibling temp file and atomic rename, so a
/// crash mid-write never leaves a truncated file at the target path.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Hex sha256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format("tensor store truncated"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::format("tensor store truncated"));
    }
    let (s, rest) = r.split_at(len);
    let out = String::from_utf8(s.to_vec())
        .map_err(|_| Error::format("tensor store name is not utf-8"))?;
    *r = rest;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorStore {
        let mut s = TensorStore::new();
        s.set_meta("step", 42u64);
        s.set_meta_f64("loss", 0.1 + 0.2);
        s.insert_raw("b/weight", vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.0])
            .unwrap();
        s.insert_raw("a/bias", vec![3], vec![0.25, 0.5, 0.75]).unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_everything() {
        let s = sample();
        let back = TensorStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.meta_u64("step").unwrap(), 42);
        assert_eq!(back.meta_f64("loss").unwrap(), 0.1 + 0.2);
        assert_eq!(
            back.entry("a/bias").unwrap().data,
            TensorData::F32(vec![0.25, 0.5, 0.75])
        );
    }

    #[test]
    fn f64_tensors_round_trip_bit_exactly() {
        let dev = Device::Cpu;
        // Values with no exact f32 representation.
        let vals = vec![0.1f64, 1.0 / 3.0, std::f64::consts::PI];
        let t = Tensor::from_vec(vals.clone(), (3,), &dev).unwrap();
        let mut s = TensorStore::new();
        s.insert("x", &t).unwrap();
        let back = TensorStore::from_bytes(&s.to_bytes()).unwrap();
        let rt = back.to_tensor("x", &dev).unwrap();
        assert_eq!(rt.dtype(), candle_core::DType::F64);
        assert_eq!(rt.to_vec1::<f64>().unwrap(), vals);
    }

    #[test]
    fn serialization_is_order_independent() {
        let mut a = TensorStore::new();
        a.insert_raw("x", vec![1], vec![1.0]).unwrap();
        a.insert_raw("y", vec![1], vec![2.0]).unwrap();
        let mut b = TensorStore::new();
        b.insert_raw("y", vec![1], vec![2.0]).unwrap();
        b.insert_raw("x", vec![1], vec![1.0]).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn digest_detects_corruption() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(TensorStore::from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(TensorStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorStore::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn save_load_via_file_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let s = sample();
        s.save(&path).unwrap();
        let loaded = TensorStore::load(&path).unwrap();
        assert_eq!(s, loaded);
        // Saving the loaded copy reproduces the file byte for byte.
        let second = dir.path().join("s2.bin");
        loaded.save(&second).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn tensor_round_trip_through_candle() {
        let dev = Device::Cpu;
        let t = Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], (2, 2), &dev).unwrap();
        let mut s = TensorStore::new();
        s.insert("m", &t).unwrap();
        let back = s.to_tensor("m", &dev).unwrap();
        assert_eq!(back.dims(), &[2, 2]);
        let diff = (&back - &t)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = TensorStore::new();
        assert!(s.insert_raw("bad", vec![2, 2], vec![1.0, 2.0]).is_err());
    }
}
