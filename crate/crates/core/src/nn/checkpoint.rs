//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PATCHMI\0"
//! hdr_len    u64
//! header     hdr_len bytes of JSON {format_version, arch, seed, epoch, tensors: [{name, shape}]}
//! per tensor u64 element count, then that many f64 values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, GeneratorConfig, PatchDiscriminatorConfig};
use crate::autodiff::{ParamStore, RunningStats, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PATCHMI\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Generator(GeneratorConfig),
    PatchDiscriminator(PatchDiscriminatorConfig),
    Classifier(ClassifierConfig),
    /// Attack outputs: one `[n, c, h, w]` tensor per class, named `class{y}`.
    Samples { method: String },
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: Arch,
    seed: u64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub seed: u64,
    pub epoch: usize,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(arch: Arch, seed: u64, epoch: usize) -> Self {
        Self {
            arch,
            seed,
            epoch,
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn extend_params(&mut self, store: &ParamStore) {
        for (name, t) in store.names().iter().zip(store.tensors()) {
            let mut t = t.clone();
            t.clear_grad();
            self.tensors.push((name.clone(), t.with_requires_grad(false)));
        }
    }

    pub(crate) fn extend_bn(&mut self, stats: &[RunningStats]) {
        for (i, s) in stats.iter().enumerate() {
            let c = s.channels();
            let mean = Tensor::new(vec![c], s.mean.clone()).expect("channel vector");
            let var = Tensor::new(vec![c], s.var.clone()).expect("channel vector");
            self.tensors.push((format!("bn{i}.running_mean"), mean));
            self.tensors.push((format!("bn{i}.running_var"), var));
        }
    }

    fn required(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "{name}: shape {:?}, architecture expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub(crate) fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let mut values = Vec::with_capacity(store.len());
        for (name, t) in store.names().iter().zip(store.tensors()) {
            values.push(self.required(name, t.shape())?.clone());
        }
        store.load_values(values)
    }

    pub(crate) fn restore_bn(&self, stats: &mut [RunningStats]) -> Result<()> {
        for (i, s) in stats.iter_mut().enumerate() {
            let c = [s.channels()];
            s.mean = self.required(&format!("bn{i}.running_mean"), &c)?.data().to_vec();
            s.var = self.required(&format!("bn{i}.running_var"), &c)?.data().to_vec();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            arch: self.arch.clone(),
            seed: self.seed,
            epoch: self.epoch,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| 8 + 8 * t.numel()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let hdr_len = r.u64("header length")? as usize;
        let json = r.take(hdr_len, "header")?;
        let raw: serde_json::Value = serde_json::from_slice(json)
            .map_err(|e| Error::CorruptCheckpoint(format!("header is not JSON: {e}")))?;
        let version = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptCheckpoint("header lacks format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::CheckpointVersion {
                found: version as u32,
                supported: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(raw)
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count = r.u64(&entry.name)? as usize;
            let expect: usize = entry.shape.iter().product();
            if count != expect {
                return Err(Error::CorruptCheckpoint(format!(
                    "{}: {count} values for shape {:?}",
                    entry.name, entry.shape
                )));
            }
            let raw = r.take(count * 8, &entry.name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            arch: header.arch,
            seed: header.seed,
            epoch: header.epoch,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::TruncatedCheckpoint(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
