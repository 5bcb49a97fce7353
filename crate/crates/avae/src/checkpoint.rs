//! Single-file checkpoint container. Layout, all integers little-endian:
//!
//! ```text
//! "AVAE"  u32 version  u64 meta_len  <meta: TOML, UTF-8>
//! u32 tensor_count
//! repeat: u32 name_len  <name>  u32 rank  u32×rank dims  f32×numel values
//! ```
//!
//! The format is self-describing — loading never needs the config file to
//! reconstruct tensor shapes — and saves go through a temporary file plus an
//! atomic rename so an interrupted save can't tear an existing checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::controller::{ControllerSnapshot, RunningMeans};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AVAE";
const VERSION: u32 = 1;

/// Everything persisted besides raw tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: Config,
    pub iteration: u64,
    pub controller: ControllerSnapshot,
    #[serde(default)]
    pub running: RunningMeans,
    /// Per-parameter Adam step counters (the moment vectors travel as
    /// tensors named `adam.m1.*` / `adam.m2.*`).
    #[serde(default)]
    pub adam_steps: BTreeMap<String, u64>,
    /// Positive/negative image counts for each stored attribute vector.
    #[serde(default)]
    pub attribute_counts: BTreeMap<String, [u64; 2]>,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    let meta_toml =
        toml::to_string(meta).map_err(|e| Error::Format(format!("unserializable metadata: {e}")))?;

    let mut buf = Vec::with_capacity(1024 + 4 * tensors.values().map(Tensor::numel).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_toml.len() as u64).to_le_bytes());
    buf.extend_from_slice(meta_toml.as_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = path.file_name().ok_or_else(|| Error::Usage(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!("{}.tmp", stem.to_string_lossy()));
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, file has {}",
                self.at,
                self.bytes.len()
            ))
        })?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| Error::Format(format!("checkpoint holds invalid UTF-8: {e}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = toml::from_str(r.utf8(meta_len)?)
        .map_err(|e| Error::Format(format!("{}: bad metadata: {e}", path.display())))?;

    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.utf8(name_len)?.to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor '{name}' claims rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
            Error::Format(format!("tensor '{name}' shape {shape:?} overflows"))
        })?;
        let raw = r.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("tensor '{name}' is inconsistent: {e}")))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after the last tensor",
            path.display(),
            bytes.len() - r.at
        )));
    }
    Ok((meta, tensors))
}
