//! Binary Gram files with a JSON sidecar.
//!
//! Layout: magic `ENTKGRAM`, `u32` version, `u64` rows, `u64` cols, `u8`
//! symmetric flag, `u8` dtype (1 = f64), then the row-major little-endian
//! payload. Metadata lives next to it in `<name>.meta.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GramMatrix, GramProvenance, KernelKind};
use crate::error::{Error, Result};
use crate::linalg::Dense;

pub const GRAM_MAGIC: &[u8; 8] = b"ENTKGRAM";
pub const GRAM_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 1 + 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramMeta {
    pub kind: KernelKind,
    pub eps: Option<f64>,
    pub num_classes: usize,
    /// Always `class_major`: row `c · N + i` is logit `c` of example `i`.
    pub layout: String,
    pub row_ids: Vec<(u64, usize)>,
    pub col_ids: Vec<(u64, usize)>,
    pub params_hash: String,
    pub dataset_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_dataset_hash: Option<String>,
    pub seed: Option<u64>,
}

impl GramMatrix {
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("meta.json")
    }

    pub fn meta(&self) -> GramMeta {
        GramMeta {
            kind: self.kind,
            eps: self.provenance.eps,
            num_classes: self.num_classes,
            layout: "class_major".into(),
            row_ids: self.row_ids.clone(),
            col_ids: self.col_ids.clone(),
            params_hash: self.provenance.params_hash.clone(),
            dataset_hash: self.provenance.dataset_hash.clone(),
            col_dataset_hash: self.provenance.col_dataset_hash.clone(),
            seed: self.provenance.seed,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(GRAM_MAGIC);
        out.extend_from_slice(&GRAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols() as u64).to_le_bytes());
        out.push(self.symmetric as u8);
        out.push(DTYPE_F64);
        for v in self.values.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary payload; returns the matrix and the symmetric flag.
    pub fn decode_values(bytes: &[u8]) -> Result<(Dense, bool)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "gram file truncated: {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..8] != GRAM_MAGIC {
            return Err(Error::Format("not a gram file (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != GRAM_VERSION {
            return Err(Error::Format(format!("unsupported gram version {version}")));
        }
        let rows = u64_at(12) as usize;
        let cols = u64_at(20) as usize;
        let symmetric = match bytes[28] {
            0 => false,
            1 => true,
            b => return Err(Error::Corrupt(format!("invalid symmetric flag {b}"))),
        };
        if bytes[29] != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype {}", bytes[29])));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Corrupt("gram dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Corrupt(format!(
                "gram payload has {} bytes, {rows}×{cols} needs {}",
                bytes.len() - HEADER_LEN,
                expected - HEADER_LEN
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Dense::from_row_major(rows, cols, data), symmetric))
    }

    pub fn from_parts(values: Dense, symmetric: bool, meta: GramMeta) -> Result<Self> {
        if meta.row_ids.len() != values.rows() || meta.col_ids.len() != values.cols() {
            return Err(Error::Corrupt(format!(
                "sidecar lists {}×{} ids for a {}×{} matrix",
                meta.row_ids.len(),
                meta.col_ids.len(),
                values.rows(),
                values.cols()
            )));
        }
        if meta.num_classes == 0
            || !values.rows().is_multiple_of(meta.num_classes)
            || !values.cols().is_multiple_of(meta.num_classes)
        {
            return Err(Error::Corrupt(format!(
                "class count {} does not divide the matrix shape",
                meta.num_classes
            )));
        }
        Ok(GramMatrix {
            values,
            symmetric,
            num_classes: meta.num_classes,
            row_ids: meta.row_ids,
            col_ids: meta.col_ids,
            kind: meta.kind,
            provenance: GramProvenance {
                params_hash: meta.params_hash,
                dataset_hash: meta.dataset_hash,
                col_dataset_hash: meta.col_dataset_hash,
                eps: meta.eps,
                seed: meta.seed,
            },
        })
    }

    /// Writes the binary file and its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        let meta = serde_json::to_vec_pretty(&self.meta())?;
        std::fs::write(Self::sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (values, symmetric) = Self::decode_values(&std::fs::read(path)?)?;
        let meta_path = Self::sidecar_path(path);
        let meta: GramMeta = serde_json::from_slice(&std::fs::read(&meta_path).map_err(|e| {
            std::io::Error::new(
                e.kind(),
                format!("missing gram sidecar {}: {e}", meta_path.display()),
            )
        })?)?;
        Self::from_parts(values, symmetric, meta)
    }

    /// Human-readable warnings for every recorded hash that disagrees with the
    /// supplied one.
    pub fn provenance_warnings(
        &self,
        dataset_hash: Option<&str>,
        params_hash: Option<&str>,
    ) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(h) = dataset_hash {
            if h != self.provenance.dataset_hash {
                out.push(format!(
                    "dataset hash {h} differs from gram's {}",
                    self.provenance.dataset_hash
                ));
            }
        }
        if let Some(h) = params_hash {
            if h != self.provenance.params_hash {
                out.push(format!(
                    "params hash {h} differs from gram's {}",
                    self.provenance.params_hash
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GramMatrix {
        GramMatrix {
            values: Dense::from_row_major(2, 2, vec![1.0, -0.25, 1e-300, f64::MAX]),
            symmetric: false,
            num_classes: 1,
            row_ids: vec![(7, 0), (9, 0)],
            col_ids: vec![(7, 0), (9, 0)],
            kind: KernelKind::ASignGd,
            provenance: GramProvenance {
                params_hash: "p".into(),
                dataset_hash: "d".into(),
                col_dataset_hash: None,
                eps: Some(1e-9),
                seed: Some(3),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.gram");
        let g = sample();
        g.save(&path).unwrap();
        assert!(dir.path().join("k.meta.json").exists());
        assert_eq!(GramMatrix::load(&path).unwrap(), g);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..8], b"ENTKGRAM");
        assert_eq!(bytes.len(), 30 + 32);
        assert_eq!(bytes[28], 0);
        assert_eq!(bytes[29], 1);
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let bytes = sample().encode();
        assert!(matches!(
            GramMatrix::decode_values(&bytes[..bytes.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        assert!(matches!(
            GramMatrix::decode_values(&bytes[..10]),
            Err(Error::Corrupt(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            GramMatrix::decode_values(&bad),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn hash_mismatch_warns() {
        let g = sample();
        assert!(g.provenance_warnings(Some("d"), Some("p")).is_empty());
        assert_eq!(g.provenance_warnings(Some("x"), None).len(), 1);
    }
}
