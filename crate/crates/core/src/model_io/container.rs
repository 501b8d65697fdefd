//! Flat named-tensor container.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of UTF-8
//! JSON mapping tensor name to `{"dtype", "shape", "data_offsets": [begin, end]}`
//! (offsets relative to the first byte after the header), then the raw
//! row-major little-endian data. An optional `"__metadata__"` entry holds a
//! string-to-string map. This is the same byte layout used by common CLIP
//! checkpoint distributions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CciError, Result};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// A dense row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CciError::Container(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Decoded container contents.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "F32" => Some(4),
        "F16" | "BF16" => Some(2),
        _ => None,
    }
}

fn decode_elements(name: &str, dtype: &str, bytes: &[u8]) -> Result<Vec<f32>> {
    let out = match dtype {
        "F32" => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        "F16" => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        "BF16" => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => {
            return Err(CciError::UnsupportedDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            })
        }
    };
    Ok(out)
}

/// Parses a container from memory. F16 and BF16 payloads are widened to f32.
pub fn parse(buf: &[u8]) -> Result<Container> {
    if buf.len() < 8 {
        return Err(CciError::Container("file shorter than header length prefix".into()));
    }
    let header_len = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
    if header_len > MAX_HEADER_LEN || header_len > (buf.len() - 8) as u64 {
        return Err(CciError::Container(format!(
            "header length {header_len} exceeds file size {}",
            buf.len()
        )));
    }
    let header_end = 8 + header_len as usize;
    let header: BTreeMap<String, Value> = serde_json::from_slice(&buf[8..header_end])?;
    let data = &buf[header_end..];

    let mut container = Container::default();
    for (name, value) in header {
        if name == METADATA_KEY {
            container.metadata = serde_json::from_value(value)?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)?;
        let size = dtype_size(&entry.dtype).ok_or_else(|| CciError::UnsupportedDtype {
            name: name.clone(),
            dtype: entry.dtype.clone(),
        })?;
        let [begin, end] = entry.data_offsets;
        let numel: usize = entry.shape.iter().product();
        if begin > end || end > data.len() {
            return Err(CciError::Container(format!(
                "tensor `{name}` offsets [{begin}, {end}) outside data section of {} bytes",
                data.len()
            )));
        }
        if end - begin != numel * size {
            return Err(CciError::Container(format!(
                "tensor `{name}` has {} bytes, shape {:?} needs {}",
                end - begin,
                entry.shape,
                numel * size
            )));
        }
        let values = decode_elements(&name, &entry.dtype, &data[begin..end])?;
        container.tensors.insert(
            name,
            Tensor {
                shape: entry.shape,
                data: values,
            },
        );
    }
    Ok(container)
}

/// Serializes all tensors as F32 in name order. The header is space-padded to
/// an 8-byte boundary.
pub fn serialize(container: &Container) -> Result<Vec<u8>> {
    let mut header = serde_json::Map::new();
    if !container.metadata.is_empty() {
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&container.metadata)?,
        );
    }
    let mut offset = 0usize;
    for (name, tensor) in &container.tensors {
        let len = tensor.numel() * 4;
        let entry = HeaderEntry {
            dtype: "F32".into(),
            shape: tensor.shape.clone(),
            data_offsets: [offset, offset + len],
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
    while (8 + header_bytes.len()) % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in container.tensors.values() {
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<(Container, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| CciError::io(path, e))?;
    let container = parse(&bytes)?;
    Ok((container, bytes))
}

pub fn write(container: &Container, path: &Path) -> Result<()> {
    let bytes = serialize(container)?;
    std::fs::write(path, bytes).map_err(|e| CciError::io(path, e))
}
