//! Binary checkpoints: a fixed header followed by the flat parameter vector.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `VRLCKPT\0` |
//! | 4     | version (u32) |
//! | 4 × 3 | d, T, B (u32) |
//! | 32    | config hash |
//! | 8     | parameter count (u64) |
//! | 8 × n | parameters (f64) |

use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::{PolicyParams, NUM_BINS, NUM_TEMPLATES};

pub const MAGIC: &[u8; 8] = b"VRLCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 12 + 32 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub config_hash: [u8; 32],
}

pub fn encode(params: &PolicyParams, config_hash: &[u8; 32]) -> Vec<u8> {
    let flat = params.to_flat();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [params.dim(), NUM_TEMPLATES, NUM_BINS] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(config_hash);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for x in flat {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated);
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let (d, t, b) = (u32_at(bytes, 12) as usize, u32_at(bytes, 16), u32_at(bytes, 20));
    if t as usize != NUM_TEMPLATES || b as usize != NUM_BINS {
        return Err(CheckpointError::Incompatible(format!(
            "policy shape T={t}, B={b}; this build uses T={NUM_TEMPLATES}, B={NUM_BINS}"
        )));
    }
    let config_hash: [u8; 32] = bytes[24..56].try_into().unwrap();
    let n = u64::from_le_bytes(bytes[56..64].try_into().unwrap()) as usize;
    let expected = PolicyParams::zeros(d).num_params();
    if n != expected {
        return Err(CheckpointError::Incompatible(format!(
            "{n} parameters stored, d={d} needs {expected}"
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * n {
        return Err(CheckpointError::Truncated);
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = PolicyParams::from_flat(d, &flat).expect("length checked above");
    Ok(Checkpoint { params, config_hash })
}

pub fn save(path: &Path, params: &PolicyParams, config_hash: &[u8; 32]) -> io::Result<()> {
    std::fs::write(path, encode(params, config_hash))
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&std::fs::read(path)?)
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(to_hex(&Sha256::digest(std::fs::read(path)?)))
}
