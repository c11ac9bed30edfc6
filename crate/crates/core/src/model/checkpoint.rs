//! Binary checkpoints: magic, little-endian header length, JSON header, then
//! every parameter as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForecastModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AIRCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

pub fn to_bytes(model: &ForecastModel) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        manifest: model
            .store
            .manifest()
            .into_iter()
            .map(|(name, shape)| ManifestEntry { name, shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let values = model.store.flat_values();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], source: &str) -> Result<ForecastModel> {
    let bad = |message: &str| Error::Format {
        path: source.to_string(),
        line: 0,
        message: message.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut model = ForecastModel::new(header.config, 0)?;
    let expected = model.store.manifest();
    let found: Vec<(String, Vec<usize>)> = header
        .manifest
        .into_iter()
        .map(|e| (e.name, e.shape))
        .collect();
    if expected != found {
        return Err(bad("parameter manifest does not match the configuration"));
    }
    let payload = &bytes[16 + len..];
    if payload.len() != 8 * model.store.num_scalars() {
        return Err(bad("payload length does not match the manifest"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.store.load_flat(&values)?;
    Ok(model)
}

pub fn save(model: &ForecastModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ForecastModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}
