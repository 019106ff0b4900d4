//! Versioned binary checkpoints.
//!
//! Layout (little endian): magic `BFCK`, `u32` version, `u64` length of the
//! JSON run config, the config bytes, `u64` parameter count, then the
//! parameters as `f64`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::write_atomic;
use crate::model::Model;

const MAGIC: &[u8; 4] = b"BFCK";
pub const VERSION: u32 = 1;

pub fn encode(config: &RunConfig, model: &Model) -> Vec<u8> {
    let json = serde_json::to_vec(config).expect("config serialises");
    let mut out = Vec::with_capacity(24 + json.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(RunConfig, Model)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let config: RunConfig = serde_json::from_slice(r.take(len)?)?;
    config.validate()?;
    let n = r.u64()? as usize;
    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("parameter count overflow".into()))?)?;
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = Model::from_params(config.model.clone(), params)?;
    Ok((config, model))
}

pub fn save(path: &Path, config: &RunConfig, model: &Model) -> Result<()> {
    write_atomic(path, &encode(config, model))
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    decode(&std::fs::read(path)?)
}
