//! `HEATCKPT` files: magic, u32 LE version, u64 LE header length, a JSON
//! header, then f64 LE payloads in header order. Writers always emit
//! names in sorted order, so equal stores give equal bytes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::orchestration::freeze::is_known_family;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HEATCKPT";
pub const VERSION: u32 = 1;

/// What produced a checkpoint, one entry per completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub trainable_params: usize,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub provenance: Vec<StageRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorHeader>,
    provenance: Vec<StageRecord>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            provenance: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            tensors: self
                .params
                .iter()
                .map(|(name, t, trainable)| TensorHeader {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    trainable,
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t, _) in self.params.iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| Error::CheckpointTruncated(format!("need {} bytes, file has {}", at + n, bytes.len())))
        };
        if take(0, 8)? != MAGIC {
            return Err(Error::CheckpointFormat("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(take(12, 8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(20, hlen)?)
            .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
        let mut at = 20 + hlen;
        let mut seen = BTreeSet::new();
        let mut params = ParamStore::new();
        for th in header.tensors {
            if !seen.insert(th.name.clone()) {
                return Err(Error::DuplicateParam(th.name));
            }
            if !is_known_family(&th.name) {
                return Err(Error::UnknownParam(th.name));
            }
            let n: usize = th.shape.iter().product();
            let raw = take(at, 8 * n)?;
            at += 8 * n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(&th.name, Tensor::new(th.shape, data), th.trainable)?;
        }
        if at != bytes.len() {
            return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self {
            params,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
