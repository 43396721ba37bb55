//! On-disk format: the magic line, one line of JSON manifest, then the raw
//! little-endian f32 blobs of every tensor in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::Bfm;
use super::{BfmConfig, BfmError};
use crate::numgrad::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "TTCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    /// Hex SHA-256 of the concatenated blobs.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub data: Vec<Vec<f32>>,
}

fn digest(data: &[Vec<f32>]) -> String {
    let mut h = Sha256::new();
    for t in data {
        for x in t {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    /// Snapshots every parameter whose name starts with one of `prefixes`, in
    /// store order.
    pub fn from_store(
        kind: &str,
        config: serde_json::Value,
        store: &ParamStore<f32>,
        prefixes: &[&str],
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (_, p) in store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|x| p.name.starts_with(x)))
        {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            });
            data.push(p.value.data().to_vec());
        }
        let sha256 = digest(&data);
        Self {
            manifest: Manifest {
                kind: kind.into(),
                config,
                tensors,
                metadata,
                sha256,
            },
            data,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, BfmError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        let json = serde_json::to_string(&self.manifest).map_err(|e| BfmError::Checkpoint(e.to_string()))?;
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        for t in &self.data {
            for x in t {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BfmError> {
        let bad = |m: &str| BfmError::Checkpoint(m.to_string());
        let magic_end = CHECKPOINT_MAGIC.len();
        if bytes.len() <= magic_end || &bytes[..magic_end] != CHECKPOINT_MAGIC.as_bytes() || bytes[magic_end] != b'\n' {
            return Err(bad("missing magic header"));
        }
        let rest = &bytes[magic_end + 1..];
        let nl = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| bad("unterminated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&rest[..nl]).map_err(|e| BfmError::Checkpoint(format!("manifest: {e}")))?;
        let mut blob = &rest[nl + 1..];
        let mut data = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            if blob.len() < 4 * n {
                return Err(bad(&format!("blob for {} is truncated", t.name)));
            }
            let (head, tail) = blob.split_at(4 * n);
            data.push(
                head.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
            blob = tail;
        }
        if !blob.is_empty() {
            return Err(bad(&format!("{} trailing bytes after the last blob", blob.len())));
        }
        let actual = digest(&data);
        if actual != manifest.sha256 {
            return Err(BfmError::Hash {
                expected: manifest.sha256,
                actual,
            });
        }
        Ok(Self { manifest, data })
    }

    /// Copies the stored tensors into `store` by name; every tensor must exist
    /// there with the same shape.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<(), BfmError> {
        for (entry, data) in self.manifest.tensors.iter().zip(&self.data) {
            let id = store
                .id(&entry.name)
                .ok_or_else(|| BfmError::Shape(format!("model has no tensor {}", entry.name)))?;
            let p = store.get_mut(id);
            if p.value.shape() != entry.shape.as_slice() {
                return Err(BfmError::Shape(format!(
                    "{}: checkpoint {:?}, model {:?}",
                    entry.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(entry.shape.clone(), data.clone())?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), BfmError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes()?)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, BfmError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

impl Bfm {
    /// Snapshot of the `bfm.` parameters.
    pub fn checkpoint(
        &self,
        store: &ParamStore<f32>,
        metadata: BTreeMap<String, serde_json::Value>,
    ) -> Result<Checkpoint, BfmError> {
        let config = serde_json::to_value(&self.cfg).map_err(|e| BfmError::Checkpoint(e.to_string()))?;
        Ok(Checkpoint::from_store(
            "bfm",
            config,
            store,
            &[super::model::PREFIX],
            metadata,
        ))
    }

    /// Rebuilds the model described by the manifest into `store` and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint, store: &mut ParamStore<f32>) -> Result<Self, BfmError> {
        if ckpt.manifest.kind != "bfm" {
            return Err(BfmError::Checkpoint(format!(
                "expected a bfm checkpoint, got {:?}",
                ckpt.manifest.kind
            )));
        }
        let cfg: BfmConfig = serde_json::from_value(ckpt.manifest.config.clone())
            .map_err(|e| BfmError::Checkpoint(format!("config: {e}")))?;
        let bfm = Bfm::new(store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = store.count_prefix(super::model::PREFIX);
        let stored: usize = ckpt.data.iter().map(Vec::len).sum();
        ckpt.restore(store)?;
        if stored != expected {
            return Err(BfmError::Shape(format!(
                "checkpoint holds {stored} values, model has {expected}"
            )));
        }
        Ok(bfm)
    }
}
