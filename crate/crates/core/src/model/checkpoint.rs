//! Checkpoint files: a binary blob of named `f64` tensors plus a JSON
//! manifest listing names, shapes and per-tensor SHA-256 checksums.
//!
//! Binary layout (little endian):
//!
//! ```text
//! b"DIFFACT-CKPT\n"  u32 version  u32 tensor_count
//! per tensor: u32 name_len, name bytes, u32 ndim, u64 dims[ndim], f64 data[..]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PolicyModel};
use crate::rng::sha256_hex;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"DIFFACT-CKPT\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<ManifestTensor>,
    pub file_sha256: String,
    /// Free-form provenance (seed, config fingerprint, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn tensor_sha(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// `model.bin` -> `model.manifest.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("manifest.json")
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl PolicyModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 8 + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors().len() as u32).to_le_bytes());
        for t in self.tensors() {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in &self.params()[t.range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest(&self, bytes: &[u8], metadata: BTreeMap<String, String>) -> CheckpointManifest {
        CheckpointManifest {
            version: CHECKPOINT_FORMAT_VERSION,
            config: self.config().clone(),
            tensors: self
                .tensors()
                .iter()
                .map(|t| ManifestTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    sha256: tensor_sha(&self.params()[t.range()]),
                })
                .collect(),
            file_sha256: sha256_hex(bytes),
            metadata,
        }
    }

    /// Writes `path` and its manifest next to it.
    pub fn save(&self, path: &Path, metadata: BTreeMap<String, String>) -> Result<CheckpointManifest> {
        let bytes = self.to_checkpoint_bytes();
        let manifest = self.manifest(&bytes, metadata);
        std::fs::write(path, &bytes)?;
        std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Loads a checkpoint, rejecting any disagreement with its manifest.
    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        let bytes = std::fs::read(path)?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
        let model = Self::from_checkpoint_bytes(&bytes, &manifest)?;
        Ok((model, manifest))
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], manifest: &CheckpointManifest) -> Result<Self> {
        if manifest.version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        if sha256_hex(bytes) != manifest.file_sha256 {
            return Err(Error::Format("checkpoint checksum does not match manifest".into()));
        }
        let mut r = Reader { bytes, at: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        if count != manifest.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, manifest lists {}",
                manifest.tensors.len()
            )));
        }
        let mut params = Vec::new();
        for expected in &manifest.tensors {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if name != expected.name || shape != expected.shape {
                return Err(Error::Format(format!(
                    "tensor {name} {shape:?} does not match manifest entry {} {:?}",
                    expected.name, expected.shape
                )));
            }
            let len: usize = shape.iter().product();
            let values: Vec<f64> = r
                .take(len * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensor_sha(&values) != expected.sha256 {
                return Err(Error::Format(format!("checksum mismatch for tensor {name}")));
            }
            params.extend(values);
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        let model = Self::from_params(manifest.config.clone(), params)?;
        let expected: Vec<(&str, &[usize])> = model
            .tensors()
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect();
        let found: Vec<(&str, &[usize])> = manifest
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect();
        if expected != found {
            return Err(Error::Format("tensor layout does not match the configuration".into()));
        }
        Ok(model)
    }
}
