//! Versioned binary container for network weights plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! | offset   | size | content                                          |
//! |----------|------|--------------------------------------------------|
//! | 0        | 8    | magic `PRCASCKP`                                 |
//! | 8        | 4    | `u32` format version (currently 1)               |
//! | 12       | 8    | `u64` header length `N`                          |
//! | 20       | N    | UTF-8 JSON header `{kind, meta, tensors}`        |
//! | 20 + N   | ...  | tensors as `f64` LE, row-major, in header order  |
//!
//! `tensors` is a list of `{name, shape}`; the payload length must match it
//! exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PRCASCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + n).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut offset = 20 + n;
        let mut params = ParamSet::new();
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * count)
                .ok_or_else(|| bad("truncated tensor payload"))?;
            offset += 8 * count;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(entry.name, Tensor::new(&entry.shape, data)?);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted run never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bitwise(values in proptest::collection::vec(any::<f64>(), 1..40), k in 1usize..4) {
            let mut params = ParamSet::new();
            params.push("a", Tensor::new(&[values.len()], values.clone()).unwrap());
            params.push("b", Tensor::full(&[k, 2], -0.0));
            let ck = Checkpoint { kind: "test".into(), meta: serde_json::json!({"epoch": 3}), params };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.kind, ck.kind);
            prop_assert_eq!(back.meta, ck.meta);
            for (x, y) in back.params.tensors().zip(ck.params.tensors()) {
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::full(&[3], 1.0));
        let ck = Checkpoint { kind: "x".into(), meta: serde_json::Value::Null, params };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("t")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong, Path::new("t")).is_err());
    }
}
