//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header listing every tensor (name, shape, offset in values), then all
//! values as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<CheckpointEntry>,
}

const FORMAT: &str = "airtrack-f32-v1";

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut values: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, t) in store.params().chain(store.buffers()) {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            values.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + values.len());
    out.write_all(&(header.len() as u64).to_le_bytes()).expect("vec write");
    out.extend_from_slice(&header);
    out.extend_from_slice(&values);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads all tensors of a checkpoint in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format != FORMAT {
        return Err(bad(&format!("unsupported format {}", header.format)));
    }
    let data = &bytes[8 + hlen..];
    if data.len() % 4 != 0 {
        return Err(bad("value section not a multiple of 4 bytes"));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    header
        .tensors
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(&format!("tensor {} exceeds value section", e.name)))?;
            Ok((e.name, Tensor::new(&e.shape, slice.to_vec())?))
        })
        .collect()
}

/// Loads a checkpoint into a store with matching names and shapes.
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let tensors = read_checkpoint(path)?;
    let expected = store.len() + store.buffers().count();
    if tensors.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {expected} tensors, found {}", tensors.len()),
        });
    }
    for (name, t) in tensors {
        store.set_named(&name, t.cast())?;
    }
    Ok(())
}
