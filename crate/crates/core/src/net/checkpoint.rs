//! Binary checkpoint: magic, format version, JSON header, then one
//! little-endian `f32` blob per entry in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelState, Variant};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VLLVECKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub variant: Variant,
    pub init_seed: u64,
    pub arch_hash: String,
    pub step: u64,
    /// Free-form state owned by the caller (training config, schedule).
    pub meta: serde_json::Value,
    pub entries: Vec<EntryMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<Vec<f32>>,
}

impl Checkpoint {
    /// Captures every model parameter under its own name.
    pub fn from_model<T: Real>(model: &ModelState<T>, step: u64, meta: serde_json::Value) -> Self {
        let mut ck = Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_FORMAT_VERSION,
                variant: model.variant(),
                init_seed: model.init_seed(),
                arch_hash: model.arch_hash(),
                step,
                meta,
                entries: Vec::new(),
            },
            data: Vec::new(),
        };
        model.visit_all(&mut |p| {
            ck.push(
                &p.name,
                p.shape.clone(),
                p.value.iter().map(|v| v.to_f64() as f32).collect(),
            )
        });
        ck
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header.entries.push(EntryMeta {
            name: name.to_string(),
            shape,
        });
        self.data.push(data);
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.header
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| self.data[i].as_slice())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let total: usize = self.data.iter().map(Vec::len).sum();
        let mut bytes = Vec::with_capacity(20 + header.len() + 4 * total);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for blob in &self.data {
            for v in blob {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| bad(e.to_string()))?;
        let mut offset = 20 + hlen;
        let mut data = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let chunk = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("truncated blob `{}`", e.name)))?;
            data.push(
                chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after last blob".into()));
        }
        Ok(Self { header, data })
    }

    /// Rebuilds the model, checking the architecture hash and every shape.
    pub fn to_model<T: Real>(&self) -> Result<ModelState<T>> {
        let mut model = ModelState::<T>::new(self.header.variant, self.header.init_seed);
        let hash = model.arch_hash();
        if hash != self.header.arch_hash {
            return Err(Error::Checkpoint(format!(
                "architecture hash mismatch: file has {}, this build expects {hash}",
                self.header.arch_hash
            )));
        }
        let mut missing = None;
        model.visit_all_mut(&mut |p| {
            let found = self
                .header
                .entries
                .iter()
                .position(|e| e.name == p.name && e.shape == p.shape)
                .map(|i| &self.data[i]);
            match found {
                Some(v) => p
                    .value
                    .iter_mut()
                    .zip(v)
                    .for_each(|(d, &s)| *d = T::from_f64(s as f64)),
                None => missing = Some(p.name.clone()),
            }
        });
        match missing {
            Some(name) => Err(Error::Checkpoint(format!(
                "parameter `{name}` missing or misshapen"
            ))),
            None => Ok(model),
        }
    }

    /// Loads a model and checks it is of the expected variant.
    pub fn to_model_of<T: Real>(&self, variant: Variant) -> Result<ModelState<T>> {
        if self.header.variant != variant {
            return Err(Error::Variant(format!(
                "checkpoint holds a {} model, expected {variant}",
                self.header.variant
            )));
        }
        self.to_model()
    }
}
