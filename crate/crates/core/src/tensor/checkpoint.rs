//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "LSNCKPT1"
//! 8 bytes   u64 manifest length M
//! M bytes   UTF-8 JSON manifest:
//!           {"params": [{"name": .., "shape": [..]}, ..], "hyper": {..}}
//! rest      f64 values of each parameter, row-major, in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::value::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LSNCKPT1";

pub type Hyper = BTreeMap<String, serde_json::Value>;

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    hyper: Hyper,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint(store: &ParamStore, hyper: &Hyper) -> Result<Vec<u8>> {
    let manifest = Manifest {
        params: store
            .iter()
            .map(|(name, t)| ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        hyper: hyper.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + store.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore, Hyper)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut cursor = 16 + mlen;
    let mut store = ParamStore::new();
    for entry in manifest.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + n * 8)
            .ok_or_else(|| bad("truncated parameter data"))?;
        cursor += n * 8;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(entry.name, Tensor::new(entry.shape, data)?);
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((store, manifest.hyper))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, hyper: &Hyper) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store, hyper)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Hyper)> {
    decode_checkpoint(&std::fs::read(path)?)
}
