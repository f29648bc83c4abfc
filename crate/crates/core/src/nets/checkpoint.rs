//! Checkpoint container: a JSON manifest followed by raw little-endian arrays.
//!
//! ```text
//! "DGCK" | u32 format_version | u32 manifest_len | manifest (UTF-8 JSON) | arrays
//! ```
//!
//! The manifest repeats the format version and records the precision tag
//! (`f32` writes 4-byte floats, `f64` 8-byte), free-form metadata, and the
//! name and shape of every array in payload order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Params;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    precision: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

/// Named arrays plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor<T>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    /// Appends every tensor of `params` as `prefix/name`.
    pub fn push_params(&mut self, prefix: &str, params: &Params<T>) {
        for (name, t) in params.iter() {
            self.arrays.push((format!("{prefix}/{name}"), t.clone()));
        }
    }

    /// Collects the arrays under `prefix/` in stored order.
    pub fn params(&self, prefix: &str) -> Result<Params<T>> {
        let head = format!("{prefix}/");
        let (names, tensors): (Vec<String>, Vec<Tensor<T>>) = self
            .arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&head).map(|s| (s.to_string(), t.clone())))
            .unzip();
        if names.is_empty() {
            return Err(bad(format!("no arrays under {prefix}")));
        }
        Params::new(names, tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            precision: T::TAG.to_string(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let text = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.arrays.iter().map(|(_, t)| t.len() * T::BYTES).sum();
        let mut out = Vec::with_capacity(12 + text.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, t) in &self.arrays {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(bad("manifest version disagrees with header"));
        }
        if manifest.precision != T::TAG {
            return Err(bad(format!(
                "checkpoint precision {} but {} requested",
                manifest.precision,
                T::TAG
            )));
        }
        let mut pos = 12 + mlen;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for entry in manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * T::BYTES;
            let raw = bytes
                .get(pos..end)
                .ok_or_else(|| bad(format!("truncated array {}", entry.name)))?;
            let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            arrays.push((entry.name, Tensor::new(entry.shape, data)?));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { meta: manifest.meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{Generator, Preset};
    use crate::rng::{Purpose, Stream};

    #[test]
    fn params_round_trip_bit_exactly() {
        let mut rng = Stream::new(1, Purpose::Init);
        let g = Generator::<f32>::new(Preset::Tiny.generator(35), &mut rng).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"spec": g.spec()}));
        ck.push_params("g", g.params());
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        let p = back.params("g").unwrap();
        for ((_, a), (_, b)) in p.iter().zip(g.params().iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let rebuilt = Generator::from_params(*g.spec(), p).unwrap();
        assert_eq!(rebuilt.params(), g.params());
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::<f32>::new(serde_json::json!({}));
        ck.arrays.push(("a".into(), Tensor::full(&[3], 1.5)));
        let bytes = ck.to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(Checkpoint::<f32>::from_bytes(&bad_version).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }
}
