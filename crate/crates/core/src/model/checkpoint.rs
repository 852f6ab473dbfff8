//! Checkpoint layout: the magic bytes, a little-endian u64 header length, a
//! JSON header (config plus parameter names and shapes), then each parameter
//! as little-endian f64 values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore, SeedModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"SEEDCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &SeedModel, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + 8 * model.params().numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated {
        expected: (*pos as u64).saturating_add(n as u64),
        actual: bytes.len() as u64,
    })?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

/// Loads a checkpoint; when `expected` is given its config must match the
/// stored one up to the WES/INIT flags.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<SeedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut pos = 0;
    if take(&bytes, &mut pos, CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint (bad magic)", path.display())));
    }
    let len = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Format("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&bytes, &mut pos, len)?)?;
    if let Some(exp) = expected {
        exp.check_compatible(&header.config)?;
    }
    let mut params = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = take(&bytes, &mut pos, n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(entry.name.clone(), Tensor::param(&entry.shape, data)?)?;
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", bytes.len() - pos)));
    }
    SeedModel::from_params(header.config, params)
}
