//! Binary checkpoint: magic, version, JSON model config, then every
//! parameter tensor as a `u64` length followed by little-endian `f64`s.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TemprModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPRC";
const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &TemprModel) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(32 + config.len() + 8 * model.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors = model.store.tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TemprModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u64()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u64()?;
    let mut values = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u64()?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        values.push(
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    TemprModel::from_values(config, values)
}

pub fn save_checkpoint(model: &TemprModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TemprModel> {
    decode(&fs::read(path)?)
}
