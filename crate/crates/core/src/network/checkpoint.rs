//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic `PDETCKPT`, u32 format version, u64 header length,
//! UTF-8 JSON header, then every tensor as little-endian f32 in header order.
//! See `docs/data_formats.md`.

use std::collections::BTreeMap;
use std::path::Path;

use posedet_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Network, NetworkError, Normalization};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 8] = b"PDETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: BackboneConfig,
    normalization: Normalization,
    params: Vec<TensorEntry>,
    /// Non-parameter state such as optimizer buffers.
    extra: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Everything restored from a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub normalization: Normalization,
    pub extra: BTreeMap<String, Tensor<f32>>,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    network: &Network<f32>,
    normalization: &Normalization,
    extra: &BTreeMap<String, Tensor<f32>>,
    meta: serde_json::Value,
) -> Result<(), NetworkError> {
    let mut offset = 0;
    let mut index = |name: &str, t: &Tensor<f32>| {
        let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset };
        offset += t.len();
        e
    };
    let params: Vec<_> = network.params().iter().map(|(_, n, t)| index(n, t)).collect();
    let extra_index: Vec<_> = extra.iter().map(|(n, t)| index(n, t)).collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: network.config().clone(),
        normalization: *normalization,
        params,
        extra: extra_index,
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut bytes = Vec::with_capacity(20 + json.len() + offset * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in network.params().iter().map(|(_, _, t)| t).chain(extra.values()) {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes).map_err(|source| NetworkError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NetworkError> {
    let bytes = std::fs::read(path).map_err(|source| NetworkError::Io { path: path.display().to_string(), source })?;
    decode(&bytes).map_err(|reason| match reason {
        Decode::Bad(reason) => NetworkError::Checkpoint { path: path.display().to_string(), reason },
        Decode::Net(e) => e,
    })
}

enum Decode {
    Bad(String),
    Net(NetworkError),
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, Decode> {
    let bad = |m: &str| Decode::Bad(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing PDETCKPT magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Decode::Bad(format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let data_start =
        20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..data_start]).map_err(|e| Decode::Bad(format!("header: {e}")))?;
    let data = &bytes[data_start..];
    let read = |e: &TensorEntry| -> Result<Tensor<f32>, Decode> {
        let n: usize = e.shape.iter().product();
        let lo = e.offset * 4;
        let hi = lo + n * 4;
        if hi > data.len() {
            return Err(Decode::Bad(format!("tensor {} exceeds data section", e.name)));
        }
        let vals = data[lo..hi].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor::new(e.shape.clone(), vals))
    };
    let mut store = ParamStore::new();
    for e in &header.params {
        store.add(e.name.clone(), read(e)?);
    }
    let mut network = Network::new(header.config, 0).map_err(Decode::Net)?;
    network.load_params(store).map_err(Decode::Net)?;
    let mut extra = BTreeMap::new();
    for e in &header.extra {
        extra.insert(e.name.clone(), read(e)?);
    }
    Ok(Checkpoint { network, normalization: header.normalization, extra, meta: header.meta })
}
