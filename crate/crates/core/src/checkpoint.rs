//! Parameter checkpoints.
//!
//! Layout: the 8-byte magic `STRGNNCK`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every tensor's values as raw
//! little-endian `f64`. The header lists each tensor's name, shape and byte
//! offset into the payload, plus a free-form `meta` object and its SHA-256
//! (`config_hash`) so mismatched loads can be refused.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"STRGNNCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 of the compact JSON encoding of `meta`.
pub fn config_hash<T: Serialize>(meta: &T) -> Result<String> {
    let bytes = serde_json::to_vec(meta)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn encode<T: Serialize>(params: &ParamStore, meta: &T) -> Result<Vec<u8>> {
    let meta = serde_json::to_value(meta)?;
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|p| {
            let e = TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset };
            offset += p.value.len() * 8;
            e
        })
        .collect();
    let header = Header { version: VERSION, config_hash: config_hash(&meta)?, meta, tensors };
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decoded checkpoint: parameters plus the `meta` object and its hash.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: serde_json::Value,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
    }
    if config_hash(&header.meta)? != header.config_hash {
        return Err(bad("config hash does not match header metadata"));
    }
    let payload = &bytes[header_end..];
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for entry in header.tensors {
        let count: usize = entry.shape.iter().product();
        let end = entry.offset + count * 8;
        if entry.offset != expected_offset || end > payload.len() {
            return Err(Error::Checkpoint(format!("bad payload range for {}", entry.name)));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.add(entry.name, Tensor::new(entry.shape, data)?);
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint { params, meta: header.meta, config_hash: header.config_hash })
}

pub fn save<T: Serialize>(path: impl AsRef<Path>, params: &ParamStore, meta: &T) -> Result<()> {
    fs::write(path, encode(params, meta)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
