//! Weight files: magic, JSON header, then each matrix as row-major
//! little-endian `f64`.
//!
//! ```text
//! b"ENTKWGT1" | u64 LE header length | header JSON | payload(U) | payload(W1) | … | payload(V)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, MatrixRole, MuPConfig, NetworkParams, WeightMatrix};
use crate::error::{Error, Result};
use crate::linalg::Dense;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"ENTKWGT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixHeader {
    pub role: MatrixRole,
    pub rows: usize,
    pub cols: usize,
    pub multiplier: f64,
    pub init_std: f64,
    pub lr_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHeader {
    pub activation: Activation,
    pub augment_input: bool,
    pub matrices: Vec<MatrixHeader>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub mup: Option<MuPConfig>,
    /// Free-form provenance (task spec, training config hash, …).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

pub fn encode_weights(
    params: &NetworkParams,
    seed: Option<u64>,
    mup: Option<&MuPConfig>,
    provenance: serde_json::Value,
) -> Result<Vec<u8>> {
    let header = WeightHeader {
        activation: params.activation,
        augment_input: params.augment_input,
        matrices: params
            .matrices
            .iter()
            .map(|m| MatrixHeader {
                role: m.role,
                rows: m.values.rows(),
                cols: m.values.cols(),
                multiplier: m.multiplier,
                init_std: m.init_std,
                lr_scale: m.lr_scale,
            })
            .collect(),
        seed,
        mup: mup.cloned(),
        provenance,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(
        16 + json.len()
            + 8 * params
                .matrices
                .iter()
                .map(|m| m.values.len())
                .sum::<usize>(),
    );
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in &params.matrices {
        for v in m.values.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(NetworkParams, WeightHeader)> {
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| Error::Corrupt("weight header truncated".into()))?;
    let header: WeightHeader = serde_json::from_slice(body)?;
    let mut offset = 16 + hlen;
    let mut matrices = Vec::with_capacity(header.matrices.len());
    for mh in &header.matrices {
        let len = mh.rows * mh.cols;
        let chunk = bytes
            .get(offset..offset + 8 * len)
            .ok_or_else(|| Error::Corrupt(format!("payload for {} truncated", mh.role.name())))?;
        let values = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * len;
        matrices.push(WeightMatrix {
            role: mh.role,
            values: Dense::from_row_major(mh.rows, mh.cols, values),
            multiplier: mh.multiplier,
            init_std: mh.init_std,
            lr_scale: mh.lr_scale,
        });
    }
    if offset != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after weight payload",
            bytes.len() - offset
        )));
    }
    let params = NetworkParams {
        activation: header.activation,
        augment_input: header.augment_input,
        matrices,
    };
    params.validate()?;
    Ok((params, header))
}

pub fn save_weights(
    path: &Path,
    params: &NetworkParams,
    seed: Option<u64>,
    mup: Option<&MuPConfig>,
    provenance: serde_json::Value,
) -> Result<()> {
    std::fs::write(path, encode_weights(params, seed, mup, provenance)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(NetworkParams, WeightHeader)> {
    decode_weights(&std::fs::read(path)?)
}
