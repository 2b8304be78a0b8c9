//! Versioned binary checkpoints of the global adapters and client rescalers.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   magic      8 bytes  "SMFEDCKP"
//! 8   version    u32
//! 12  manifest   u64 byte length N
//! 20  manifest   N bytes of JSON: round, config hash, tensor table, blob SHA-256
//! 20+N blob      f64 little-endian values of every tensor, in table order
//! ```
//!
//! Tensors: `lora_{j}_a`, `lora_{j}_b`, `alpha` (one per expert) and
//! `rescalers` (one per client). Values travel as raw bits, so a round trip
//! is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::GlobalState;
use crate::model::LoraPair;
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"SMFEDCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Rounds completed when the checkpoint was written.
    pub round: usize,
    /// Content hash of the config that produced the state.
    pub config_hash: String,
    pub global: GlobalState,
    pub rescalers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Offset into the blob, in bytes.
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    round: usize,
    config_hash: String,
    tensors: Vec<TensorEntry>,
    blob_len: u64,
    blob_sha256: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (j, l) in self.global.loras.iter().enumerate() {
            tensors.push((format!("lora_{j}_a"), vec![l.a.rows(), l.a.cols()], l.a.data().to_vec()));
            tensors.push((format!("lora_{j}_b"), vec![l.b.rows(), l.b.cols()], l.b.data().to_vec()));
        }
        let alphas: Vec<f64> = self.global.loras.iter().map(|l| l.alpha).collect();
        tensors.push(("alpha".into(), vec![alphas.len()], alphas));
        tensors.push(("rescalers".into(), vec![self.rescalers.len()], self.rescalers.clone()));

        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, shape, values) in tensors {
            entries.push(TensorEntry {
                name,
                shape,
                dtype: "f64le".into(),
                offset: blob.len() as u64,
            });
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            round: self.round,
            config_hash: self.config_hash.clone(),
            tensors: entries,
            blob_len: blob.len() as u64,
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN as usize + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |offset: u64, message: &str| Error::Integrity {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(integrity(0, "not a checkpoint (bad magic)"));
        }
        if bytes.len() < HEADER_LEN as usize {
            return Err(integrity(bytes.len() as u64, "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if version == 0 {
            return Err(integrity(8, "version 0 is not a valid format version"));
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let blob_start = HEADER_LEN
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| integrity(bytes.len() as u64, "truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN as usize..blob_start as usize])
            .map_err(|e| integrity(HEADER_LEN + e.column() as u64, &format!("unreadable manifest: {e}")))?;
        let blob = &bytes[blob_start as usize..];
        if (blob.len() as u64) < manifest.blob_len {
            return Err(integrity(bytes.len() as u64, "truncated tensor data"));
        }
        if blob.len() as u64 > manifest.blob_len {
            return Err(integrity(blob_start + manifest.blob_len, "trailing bytes after tensor data"));
        }
        if hex::encode(Sha256::digest(blob)) != manifest.blob_sha256 {
            return Err(integrity(blob_start, "tensor data checksum mismatch"));
        }

        let read = |name: &str, expect: usize, next: &mut usize| -> Result<(Vec<usize>, Vec<f64>)> {
            let entry = manifest
                .tensors
                .get(*next)
                .filter(|e| e.name == name && e.dtype == "f64le" && e.shape.len() == expect)
                .ok_or_else(|| integrity(HEADER_LEN, &format!("manifest lacks tensor `{name}`")))?;
            *next += 1;
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = count
                .checked_mul(8)
                .and_then(|n| start.checked_add(n))
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| integrity(blob_start + entry.offset, &format!("tensor `{name}` out of bounds")))?;
            let values = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((entry.shape.clone(), values))
        };

        let experts = (manifest.tensors.len().saturating_sub(2)) / 2;
        let mut next = 0;
        let mut factors = Vec::with_capacity(experts);
        for j in 0..experts {
            let (sa, a) = read(&format!("lora_{j}_a"), 2, &mut next)?;
            let (sb, b) = read(&format!("lora_{j}_b"), 2, &mut next)?;
            factors.push((Matrix::from_vec(sa[0], sa[1], a)?, Matrix::from_vec(sb[0], sb[1], b)?));
        }
        let (_, alphas) = read("alpha", 1, &mut next)?;
        let (_, rescalers) = read("rescalers", 1, &mut next)?;
        if alphas.len() != experts {
            return Err(integrity(HEADER_LEN, "alpha count does not match expert count"));
        }
        let loras = factors
            .into_iter()
            .zip(alphas)
            .map(|((a, b), alpha)| LoraPair::new(a, b, alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            round: manifest.round,
            config_hash: manifest.config_hash,
            global: GlobalState {
                loras,
                round_index: manifest.round,
            },
            rescalers,
        })
    }

    /// Writes to a temporary sibling and renames, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let loras = (0..3)
            .map(|_| {
                LoraPair::new(
                    Matrix::random_normal(4, 2, 1.0, &mut rng),
                    Matrix::random_normal(2, 5, 1.0, &mut rng),
                    16.0,
                )
                .unwrap()
            })
            .collect();
        Checkpoint {
            round: 3,
            config_hash: "abc".into(),
            global: GlobalState { loras, round_index: 3 },
            rescalers: vec![1.0, 0.1 + 0.2, -0.0, f64::MIN_POSITIVE],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.rescalers[2].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_an_integrity_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 8, 12, 19, 20, 40, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Integrity { .. }) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn flipped_blob_bit_is_detected_at_blob_offset() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x10;
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Integrity { offset, .. }) => assert_eq!(offset, 20 + manifest_len),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn newer_versions_are_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_3.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        Checkpoint::load(&path).unwrap().save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.ckpt")),
            Err(Error::Io { .. })
        ));
    }
}
