//! Weight snapshots.
//!
//! ```text
//! b"QNET" | version: u32 LE | header length: u32 LE | header JSON | params: f64 LE...
//! ```
//!
//! The header is `{"seed": u64, "spec": NetworkSpec}`; parameters follow the
//! network layout order.

use std::path::Path;

use quadranet_core::network::{Network, NetworkSpec};
use quadranet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"QNET";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotHeader {
    pub seed: u64,
    pub spec: NetworkSpec,
}

fn err(offset: usize, detail: String) -> AppError {
    AppError::Format {
        what: "snapshot",
        offset,
        detail,
    }
}

pub fn encode(net: &Network, seed: u64) -> Vec<u8> {
    let json = serde_json::to_vec(&SnapshotHeader {
        seed,
        spec: net.spec.clone(),
    })
    .expect("spec serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &net.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Network, u64)> {
    if bytes.len() < 12 {
        return Err(err(bytes.len(), format!("truncated: {} bytes is shorter than the 12-byte preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(0, format!("bad magic {:?}, expected \"QNET\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| err(bytes.len(), format!("truncated header: need {len} bytes")))?;
    let header: SnapshotHeader = serde_json::from_slice(json).map_err(|e| err(12, format!("header JSON: {e}")))?;
    let layout = quadranet_core::network::layout(&header.spec);
    let payload = &bytes[12 + len..];
    let want: usize = layout.iter().map(|e| e.spec.elements()).sum();
    if payload.len() != 8 * want {
        return Err(err(
            12 + len,
            format!("payload holds {} bytes, spec needs {} ({want} f64 values)", payload.len(), 8 * want),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let params = layout
        .iter()
        .map(|e| {
            let data: Vec<f64> = values.by_ref().take(e.spec.elements()).collect();
            Tensor::new(e.spec.shape.clone(), data)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((Network::from_params(header.spec, params)?, header.seed))
}

pub fn save(path: &Path, net: &Network, seed: u64) -> Result<()> {
    std::fs::write(path, encode(net, seed)).map_err(|e| AppError::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network, u64)> {
    decode(&std::fs::read(path).map_err(|e| AppError::io(path, e))?)
}
