//! Binary checkpoint container.
//!
//! Layout: the magic `MTC1`, a little-endian u64 header length, a JSON header
//! (`{"config": …, "tensors": [{name, shape, offset, frozen}, …]}`) and the
//! tensor payloads as little-endian f64. Offsets count bytes from the start
//! of the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Array, ParamStore};

pub const MAGIC: &[u8; 4] = b"MTC1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint has no tensor named {0:?}")]
    Missing(String),
    #[error("tensor {name:?}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(TensorEntry, Array)>,
}

impl Checkpoint {
    /// Collects the parameters of `store` accepted by `keep`, in store order.
    pub fn from_store(config: serde_json::Value, store: &ParamStore, keep: impl Fn(&crate::tensor::Param) -> bool) -> Self {
        let mut offset = 0u64;
        let tensors = store
            .iter()
            .filter(|(_, p)| keep(p))
            .map(|(_, p)| {
                let entry = TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    frozen: !p.trainable,
                };
                offset += 8 * p.value.len() as u64;
                (entry, p.value.clone())
            })
            .collect();
        Self { config, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.tensors.iter().find(|(e, _)| e.name == name).map(|(_, a)| a)
    }

    /// Copies every tensor of the checkpoint into the same-named parameter.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for (entry, value) in &self.tensors {
            let id = store.find(&entry.name).ok_or_else(|| CheckpointError::Missing(entry.name.clone()))?;
            let expected = store.value(id).shape().to_vec();
            if expected != entry.shape {
                return Err(CheckpointError::Shape {
                    name: entry.name.clone(),
                    expected,
                    found: entry.shape.clone(),
                });
            }
            *store.value_mut(id) = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|(_, a)| 8 * a.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &self.tensors {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or(CheckpointError::Truncated)?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[12 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let raw = payload.get(start..start + 8 * n).ok_or(CheckpointError::Truncated)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let arr = Array::new(entry.shape.clone(), data).map_err(|_| CheckpointError::Truncated)?;
            tensors.push((entry, arr));
        }
        Ok(Self {
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
