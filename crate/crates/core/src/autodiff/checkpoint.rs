//! Named-tensor container.
//!
//! Layout: `u64` little-endian header length, the JSON header (an array of
//! `{name, dtype, shape, offset}`), then the payload. Offsets are byte
//! offsets from the start of the payload and are 64-byte aligned; tensors are
//! stored row-major as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn encode(tensors: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.clone(), dtype: "f32".into(), shape: t.shape().to_vec(), offset });
        offset += t.len() * 4;
        offset = offset.div_ceil(ALIGN) * ALIGN;
    }
    let header = serde_json::to_vec(&entries)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let payload_start = out.len();
    for (entry, (_, t)) in entries.iter().zip(tensors) {
        out.resize(payload_start + entry.offset, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(payload_start + offset, 0);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 8 {
        return Err(Error::Format("container shorter than its length prefix".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let entries: Vec<TensorEntry> = serde_json::from_slice(&bytes[8..payload_start])?;
    let payload = &bytes[payload_start..];
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("tensor `{}` has unsupported dtype `{}`", e.name, e.dtype)));
        }
        if e.offset % ALIGN != 0 {
            return Err(Error::Format(format!("tensor `{}` offset {} is not {ALIGN}-byte aligned", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor `{}` runs past end of payload", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((e.name, Tensor::new(&e.shape, data)?));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    decode(&std::fs::read(path)?)
}

/// Looks up a tensor by name, checking its shape.
pub fn take(tensors: &mut Vec<(String, Tensor<f32>)>, name: &str, shape: &[usize]) -> Result<Tensor<f32>> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
    let (_, t) = tensors.swap_remove(pos);
    if t.shape() != shape {
        return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}
