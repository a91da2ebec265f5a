//! Binary model checkpoints.
//!
//! ```text
//! magic        8 bytes   "SEQEXNET"
//! version      u32 LE    1
//! descriptor   6 x u32 LE  image_side, conv1_channels, conv2_channels, kernel,
//!                          head_inputs, tensor_count
//! tensors      f32 LE    every tensor of TENSOR_NAMES, in that order
//! ```

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::network::{NetworkParams, CONV1_CHANNELS, CONV2_CHANNELS, HEAD_INPUTS, KERNEL, TENSOR_NAMES};
use crate::dataset::IMAGE_SIDE;

pub const MAGIC: &[u8; 8] = b"SEQEXNET";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("architecture mismatch: checkpoint has {found:?}, expected {expected:?}")]
    ArchitectureMismatch { found: [u32; 6], expected: [u32; 6] },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn descriptor() -> [u32; 6] {
    [
        IMAGE_SIDE as u32,
        CONV1_CHANNELS as u32,
        CONV2_CHANNELS as u32,
        KERNEL as u32,
        HEAD_INPUTS as u32,
        TENSOR_NAMES.len() as u32,
    ]
}

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 4 * params.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in descriptor() {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for t in params.tensors() {
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<NetworkParams, CheckpointError> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
        if cursor.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = read_u32(take(4)?);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut found = [0u32; 6];
    for d in found.iter_mut() {
        *d = read_u32(take(4)?);
    }
    if found != descriptor() {
        return Err(CheckpointError::ArchitectureMismatch {
            found,
            expected: descriptor(),
        });
    }
    let mut params = NetworkParams::zeros();
    for t in params.tensors_mut() {
        let raw = take(4 * t.len())?;
        for (v, b) in t.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
    }
    if !cursor.is_empty() {
        return Err(CheckpointError::TrailingBytes(cursor.len()));
    }
    params.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    Ok(params)
}

pub fn save(params: &NetworkParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(params))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NetworkParams, CheckpointError> {
    decode(&std::fs::read(path)?)
}
