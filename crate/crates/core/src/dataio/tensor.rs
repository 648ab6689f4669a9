//! Flat little-endian f32 tensors with a JSON sidecar.
//!
//! A tensor `name.bin` is the raw payload; `name.json` next to it carries the
//! shape, dtype, semantic name, seed lineage and a payload checksum. Loads
//! validate all three failure modes separately: corrupt sidecar,
//! shape/payload mismatch, checksum failure.

use super::{io_err, sha256_hex, DataError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub name: String,
    /// Human-readable record of which seeds produced this tensor.
    pub seed_lineage: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
    name: String,
    seed_lineage: String,
    checksum: String,
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, name: impl Into<String>) -> Result<Self, DataError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(DataError::InvalidShape {
                shape,
                reason: "shape must be nonempty with all dims >= 1".into(),
            });
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(DataError::ShapeMismatch {
                shape,
                expected: len * 4,
                actual: data.len() * 4,
            });
        }
        Ok(Self {
            shape,
            data,
            name: name.into(),
            seed_lineage: String::new(),
        })
    }

    pub fn with_lineage(mut self, lineage: impl Into<String>) -> Self {
        self.seed_lineage = lineage.into();
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Canonical little-endian payload bytes.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn sidecar_json(&self) -> String {
        let sc = Sidecar {
            shape: self.shape.clone(),
            dtype: "f32".into(),
            name: self.name.clone(),
            seed_lineage: self.seed_lineage.clone(),
            checksum: sha256_hex(&self.payload()),
        };
        serde_json::to_string_pretty(&sc).unwrap()
    }

    /// Parses a (sidecar, payload) pair. This is the untrusted-input entry
    /// point; `load_tensor` is a thin file wrapper around it.
    pub fn from_bytes(sidecar: &[u8], payload: &[u8]) -> Result<Self, DataError> {
        let sc: Sidecar =
            serde_json::from_slice(sidecar).map_err(|e| DataError::CorruptSidecar {
                path: "<bytes>".into(),
                reason: e.to_string(),
            })?;
        if sc.dtype != "f32" {
            return Err(DataError::CorruptSidecar {
                path: "<bytes>".into(),
                reason: format!("unsupported dtype {:?}", sc.dtype),
            });
        }
        if sc.shape.is_empty() || sc.shape.iter().any(|&d| d == 0) {
            return Err(DataError::InvalidShape {
                shape: sc.shape,
                reason: "shape must be nonempty with all dims >= 1".into(),
            });
        }
        // Guard the element-count product against overflow before trusting it.
        let mut len: usize = 1;
        for &d in &sc.shape {
            len = len
                .checked_mul(d)
                .ok_or_else(|| DataError::InvalidShape {
                    shape: sc.shape.clone(),
                    reason: "element count overflows".into(),
                })?;
        }
        let expected = len.checked_mul(4).ok_or_else(|| DataError::InvalidShape {
            shape: sc.shape.clone(),
            reason: "byte count overflows".into(),
        })?;
        if payload.len() != expected {
            return Err(DataError::ShapeMismatch {
                shape: sc.shape,
                expected,
                actual: payload.len(),
            });
        }
        let actual_sum = sha256_hex(payload);
        if actual_sum != sc.checksum {
            return Err(DataError::ChecksumFailure {
                name: sc.name,
                expected: sc.checksum,
                actual: actual_sum,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            shape: sc.shape,
            data,
            name: sc.name,
            seed_lineage: sc.seed_lineage,
        })
    }
}

fn sidecar_path(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("json")
}

pub fn save_tensor(t: &TensorRecord, path: &Path) -> Result<PathBuf, DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, t.payload()).map_err(|e| io_err(path, e))?;
    let sc = sidecar_path(path);
    std::fs::write(&sc, t.sidecar_json()).map_err(|e| io_err(&sc, e))?;
    Ok(path.to_path_buf())
}

pub fn load_tensor(path: &Path) -> Result<TensorRecord, DataError> {
    let sc_path = sidecar_path(path);
    let sidecar = std::fs::read(&sc_path).map_err(|e| io_err(&sc_path, e))?;
    let payload = std::fs::read(path).map_err(|e| io_err(path, e))?;
    TensorRecord::from_bytes(&sidecar, &payload).map_err(|e| match e {
        DataError::CorruptSidecar { reason, .. } => DataError::CorruptSidecar {
            path: sc_path.display().to_string(),
            reason,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorRecord::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], "t").unwrap();
        let p = dir.path().join("t.bin");
        save_tensor(&t, &p).unwrap();
        let back = load_tensor(&p).unwrap();
        assert_eq!(t.shape, back.shape);
        assert_eq!(t.data, back.data);
    }

    #[test]
    fn shape_payload_mismatch_is_detected() {
        let err = TensorRecord::new(vec![3], vec![1.0, 2.0], "t").unwrap_err();
        assert!(matches!(err, DataError::ShapeMismatch { .. }));
        // And via the byte path too.
        let good = TensorRecord::new(vec![2], vec![1.0, 2.0], "t").unwrap();
        let mut payload = good.payload();
        payload.extend_from_slice(&[0, 0, 0, 0]);
        let err = TensorRecord::from_bytes(good.sidecar_json().as_bytes(), &payload).unwrap_err();
        assert!(matches!(err, DataError::ShapeMismatch { .. }));
    }

    #[test]
    fn corrupt_sidecar_and_checksum_are_distinct_errors() {
        let good = TensorRecord::new(vec![2], vec![1.0, 2.0], "t").unwrap();
        let payload = good.payload();
        let err = TensorRecord::from_bytes(b"{not json", &payload).unwrap_err();
        assert!(matches!(err, DataError::CorruptSidecar { .. }));
        let mut tampered = payload.clone();
        tampered[0] ^= 0x01;
        let err = TensorRecord::from_bytes(good.sidecar_json().as_bytes(), &tampered).unwrap_err();
        assert!(matches!(err, DataError::ChecksumFailure { .. }));
    }

    #[test]
    fn checksum_stable_across_saves() {
        // 64x64x3 seeded uniform noise saved twice yields the same checksum.
        let mut rng = derive_rng(42, &["tensor-test"]);
        let data: Vec<f32> = (0..64 * 64 * 3).map(|_| rng.random::<f32>()).collect();
        let t = TensorRecord::new(vec![64, 64, 3], data, "noise").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        save_tensor(&t, &p1).unwrap();
        save_tensor(&t, &p2).unwrap();
        let c1 = sha256_hex(&std::fs::read(&p1).unwrap());
        let c2 = sha256_hex(&std::fs::read(&p2).unwrap());
        assert_eq!(c1, c2);
    }
}
