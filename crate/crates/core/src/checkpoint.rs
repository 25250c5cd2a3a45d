//! Self-describing tensor archive.
//!
//! Layout: the magic line `SRLARCH1\n`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f64` in header
//! order. The header records the format version, an archive kind, free-form
//! metadata and the name, shape and offset of each tensor.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, ParamStore};
use crate::error::{Result, SrlError};

const MAGIC: &[u8] = b"SRLARCH1\n";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

fn corrupt(msg: impl Into<String>) -> SrlError {
    SrlError::Checkpoint(msg.into())
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn take_store(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.clone());
            }
        }
        store
    }

    pub fn put_adam(&mut self, prefix: &str, adam: &Adam) {
        for (name, t) in &adam.first_moment {
            self.tensors.insert(format!("{prefix}m/{name}"), t.clone());
        }
        for (name, t) in &adam.second_moment {
            self.tensors.insert(format!("{prefix}v/{name}"), t.clone());
        }
    }

    pub fn take_adam(&self, prefix: &str, config: AdamConfig, steps: u64) -> Adam {
        let mut adam = Adam::new(config);
        adam.steps = steps;
        adam.first_moment = self.take_store(&format!("{prefix}m/")).iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        adam.second_moment = self.take_store(&format!("{prefix}v/")).iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        adam
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            version: ARCHIVE_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("bad magic"))?;
        if rest.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])?;
        if header.version != ARCHIVE_VERSION {
            return Err(corrupt(format!("unsupported archive version {}", header.version)));
        }
        let blob = &rest[header_len..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + n * 8;
            if end > blob.len() {
                return Err(corrupt(format!("tensor {} runs past end of archive", e.name)));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), data).map_err(|e| corrupt(e.to_string()))?;
            tensors.insert(e.name, t);
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path.as_ref())
            .map_err(|e| corrupt(format!("{}: {e}", path.as_ref().display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(corrupt(format!("expected a {kind} archive, found {}", self.kind)));
        }
        Ok(())
    }
}
