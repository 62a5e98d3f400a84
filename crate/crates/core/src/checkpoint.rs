//! Versioned tensor container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! (caller metadata plus a tensor index), then every tensor's `f32` values in
//! little-endian order, concatenated in index order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WFMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 4],
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Serializes `meta` and `tensors`, returning the full file bytes.
pub fn encode(meta: &serde_json::Value, tensors: &[(&str, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut index = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        index.push(TensorRecord {
            name: name.to_string(),
            shape: t.shape(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: index,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub type Decoded = (serde_json::Value, Vec<(String, Tensor<f32>)>);

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    ensure!(
        bytes.len() >= 20 && &bytes[..8] == MAGIC,
        Checkpoint,
        "not a checkpoint container (bad magic)"
    );
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    ensure!(
        version == VERSION,
        Checkpoint,
        "unsupported container version {version}, expected {VERSION}"
    );
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    ensure!(20 + hlen <= bytes.len(), Checkpoint, "truncated header");
    let header: Header = serde_json::from_slice(&bytes[20..20 + hlen])?;
    let payload = &bytes[20 + hlen..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for rec in header.tensors {
        let n: usize = rec.shape.iter().product();
        let (start, end) = (4 * rec.offset, 4 * (rec.offset + n));
        ensure!(
            end <= payload.len(),
            Checkpoint,
            "tensor `{}` extends past the payload",
            rec.name
        );
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((rec.name, Tensor::new(rec.shape, data)?));
    }
    Ok((header.meta, out))
}

/// Writes atomically through a sibling temporary file.
pub fn write_container(path: &Path, meta: &serde_json::Value, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Decoded> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Plain named-tensor file (used for perceptual extractor weights).
pub fn write_tensor_file(path: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    write_container(path, &serde_json::json!({ "kind": "tensors" }), tensors)
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    Ok(read_container(path)?.1)
}
