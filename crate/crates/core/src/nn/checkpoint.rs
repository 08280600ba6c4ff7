//! Parameter checkpoint container.
//!
//! Layout (documented in `docs/checkpoint_format.md`):
//!
//! ```text
//! bytes 0..4    magic "EFT1"
//! bytes 4..8    header length `H` (u32, little-endian)
//! bytes 8..8+H  header JSON: {"version":1,"config_hash":"…",
//!                "tensors":[{"name":"…","shape":[…]}, …]}
//! rest          tensor payloads: raw f32 little-endian scalars, one tensor
//!               after another in header order, row-major, no padding
//! ```
//!
//! Scalars are stored as 32-bit floats regardless of the in-memory precision.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EFT1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("file truncated: expected {expected} payload bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("config hash mismatch: checkpoint {found}, expected {expected}")]
    ConfigHashMismatch { found: String, expected: String },
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

/// SHA-256 hex digest of a serialized configuration. Stored in the checkpoint
/// header and compared on load.
pub fn config_digest(serialized: &str) -> String {
    let digest = Sha256::digest(serialized.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    config_hash: &str,
) -> Result<(), CheckpointError> {
    let header = Header {
        version: VERSION,
        config_hash: config_hash.to_string(),
        tensors: store
            .iter()
            .map(|(_, name, value)| TensorMeta {
                name: name.to_string(),
                shape: value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    let mut payload = Vec::with_capacity(store.scalar_count() * 4);
    for (_, _, value) in store.iter() {
        for &v in value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

/// Load named tensors from a checkpoint, refusing a file whose config hash
/// differs from `expected_hash`.
pub fn load_checkpoint(
    path: &Path,
    expected_hash: &str,
) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(CheckpointError::Truncated { expected: header_len, actual: bytes.len() - 8 });
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])?;
    if header.version != VERSION {
        return Err(CheckpointError::BadVersion(header.version));
    }
    if header.config_hash != expected_hash {
        return Err(CheckpointError::ConfigHashMismatch {
            found: header.config_hash,
            expected: expected_hash.to_string(),
        });
    }
    let payload = &bytes[8 + header_len..];
    let expected_scalars: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected_scalars * 4 {
        return Err(CheckpointError::Truncated {
            expected: expected_scalars * 4,
            actual: payload.len(),
        });
    }
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for meta in header.tensors {
        let count: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 4;
            let raw: [u8; 4] = payload[at..at + 4].try_into().expect("4 bytes");
            data.push(f32::from_le_bytes(raw) as f64);
        }
        offset += count * 4;
        let tensor = Tensor::new(meta.shape, data).expect("header shape matches payload");
        out.push((meta.name, tensor));
    }
    Ok(out)
}
