// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reader and writer for the safetensors container.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of JSON
//! mapping tensor names to `{dtype, shape, data_offsets}`, then the raw
//! buffer. Offsets are relative to the start of the buffer. F16 and BF16
//! payloads are widened to f32 on read.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct EntryHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// A dense f32 tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parse a safetensors byte buffer. `origin` names the file in errors.
pub fn parse(bytes: &[u8], origin: &Path) -> Result<BTreeMap<String, RawTensor>> {
    let fail = |reason: String| ProbeError::load(origin, reason);
    if bytes.len() < 8 {
        return Err(fail("file shorter than the 8-byte header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| fail(format!("header length {header_len} exceeds file size")))?;
    let header: BTreeMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| fail(format!("header JSON: {e}")))?;
    let buffer = &bytes[header_end..];

    let mut out = BTreeMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: EntryHeader =
            serde_json::from_value(value).map_err(|e| fail(format!("tensor `{name}`: bad header entry: {e}")))?;
        let dtype = match entry.dtype.as_str() {
            "F32" => Dtype::F32,
            "F16" => Dtype::F16,
            "BF16" => Dtype::BF16,
            other => return Err(fail(format!("tensor `{name}`: unsupported dtype {other}"))),
        };
        let [begin, end] = entry.data_offsets;
        let count: usize = entry.shape.iter().product();
        if end < begin || end > buffer.len() {
            return Err(fail(format!(
                "tensor `{name}`: data range [{begin}, {end}) outside buffer of {} bytes (truncated?)",
                buffer.len()
            )));
        }
        if end - begin != count * dtype.size() {
            return Err(fail(format!(
                "tensor `{name}`: {} bytes for {count} elements of {:?}",
                end - begin,
                dtype
            )));
        }
        let raw = &buffer[begin..end];
        let data = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => raw
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        out.insert(
            name,
            RawTensor {
                shape: entry.shape,
                data,
            },
        );
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<BTreeMap<String, RawTensor>> {
    let bytes = std::fs::read(path).map_err(|e| ProbeError::load(path, e.to_string()))?;
    parse(&bytes, path)
}

/// Serialize tensors in name order. `F16` narrows each value.
pub fn serialize<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>, dtype: Dtype) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut buffer = Vec::new();
    let mut items: Vec<_> = tensors.into_iter().collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    for (name, shape, data) in items {
        let begin = buffer.len();
        for v in data {
            match dtype {
                Dtype::F32 => buffer.extend_from_slice(&v.to_le_bytes()),
                Dtype::F16 => buffer.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes()),
                Dtype::BF16 => buffer.extend_from_slice(&half::bf16::from_f32(*v).to_le_bytes()),
            }
        }
        header.insert(
            name.to_string(),
            EntryHeader {
                dtype: format!("{dtype:?}"),
                shape: shape.to_vec(),
                data_offsets: [begin, buffer.len()],
            },
        );
    }
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    // Pad so the buffer starts 8-byte aligned.
    while (8 + json.len()) % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + buffer.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&buffer);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f16_is_widened() {
        let data = [1.5f32, -2.0, 0.25];
        let bytes = serialize([("t", &[3usize][..], &data[..])], Dtype::F16);
        let parsed = parse(&bytes, Path::new("mem")).unwrap();
        assert_eq!(parsed["t"].data, data.to_vec());
    }

    #[test]
    fn truncated_buffer_names_tensor() {
        let data = [1.0f32; 16];
        let mut bytes = serialize([("blk.weight", &[4usize, 4][..], &data[..])], Dtype::F32);
        bytes.truncate(bytes.len() - 10);
        let err = parse(&bytes, Path::new("model.safetensors")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.safetensors"), "{msg}");
        assert!(msg.contains("blk.weight"), "{msg}");
    }

    #[test]
    fn header_length_overflow() {
        let mut bytes = (1u64 << 40).to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(parse(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn metadata_entry_skipped() {
        let header = br#"{"__metadata__":{"format":"pt"},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&3.0f32.to_le_bytes());
        let parsed = parse(&bytes, Path::new("x")).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed["a"].data, vec![3.0]);
    }
}
