//! Checkpoint container and its on-disk tensor format.
//!
//! A checkpoint file is laid out as:
//!
//! ```text
//! [0, 8)      little-endian u64: header byte length N
//! [8, 8+N)    UTF-8 JSON header: name -> {"dtype", "shape", "data_offsets"}
//! [8+N, ...)  payload: concatenated row-major little-endian tensor data
//! ```
//!
//! `data_offsets` are `[begin, end)` byte positions relative to the start of
//! the payload. The optional `"__metadata__"` header entry holds a free-form
//! string map and is preserved verbatim. On save, tensors are laid out in
//! lexicographic name order with contiguous offsets, so equal checkpoints
//! always serialize to byte-identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on the JSON header; larger length fields are rejected outright.
pub const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

/// Element type of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Dtype {
    Bool,
    U8,
    I32,
    I64,
    F16,
    Bf16,
    F32,
    F64,
}

impl Dtype {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "BOOL" => Ok(Dtype::Bool),
            "U8" => Ok(Dtype::U8),
            "I32" => Ok(Dtype::I32),
            "I64" => Ok(Dtype::I64),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::Bf16),
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dtype::Bool => "BOOL",
            Dtype::U8 => "U8",
            Dtype::I32 => "I32",
            Dtype::I64 => "I64",
            Dtype::F16 => "F16",
            Dtype::Bf16 => "BF16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    /// Size of one element in bytes.
    pub fn element_size(&self) -> usize {
        match self {
            Dtype::Bool | Dtype::U8 => 1,
            Dtype::F16 | Dtype::Bf16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::I64 | Dtype::F64 => 8,
        }
    }

    /// Floating-point dtypes are the only ones merged arithmetically.
    pub fn is_float(&self) -> bool {
        matches!(self, Dtype::F16 | Dtype::Bf16 | Dtype::F32 | Dtype::F64)
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single tensor: raw little-endian bytes plus shape and dtype.
///
/// Data is kept in storage form; [`Tensor::to_f32_vec`] decodes on demand so
/// a loaded checkpoint holds exactly the file's payload bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    /// Wraps raw storage bytes; length must match `shape` and `dtype`.
    pub fn from_raw(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let count = element_count(&shape)?;
        let expected = count
            .checked_mul(dtype.element_size())
            .ok_or_else(|| Error::MalformedHeader("tensor byte size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::LengthMismatch(format!(
                "tensor data is {} bytes, shape {:?} with dtype {} needs {}",
                data.len(),
                shape,
                dtype,
                expected
            )));
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// Encodes f32 values into the given storage dtype (round-to-nearest-even
    /// for the half-precision types).
    pub fn from_f32_vec(dtype: Dtype, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let count = element_count(&shape)?;
        if values.len() != count {
            return Err(Error::LengthMismatch(format!(
                "{} values for shape {:?}",
                values.len(),
                shape
            )));
        }
        let mut data = Vec::with_capacity(count * dtype.element_size());
        match dtype {
            Dtype::F32 => {
                for v in values {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in values {
                    data.extend_from_slice(&(*v as f64).to_le_bytes());
                }
            }
            Dtype::F16 => {
                for v in values {
                    data.extend_from_slice(&half::f16::from_f32(*v).to_le_bytes());
                }
            }
            Dtype::Bf16 => {
                for v in values {
                    data.extend_from_slice(&half::bf16::from_f32(*v).to_le_bytes());
                }
            }
            Dtype::I32 => {
                for v in values {
                    data.extend_from_slice(&(*v as i32).to_le_bytes());
                }
            }
            Dtype::I64 => {
                for v in values {
                    data.extend_from_slice(&(*v as i64).to_le_bytes());
                }
            }
            Dtype::U8 => {
                for v in values {
                    data.push(*v as u8);
                }
            }
            Dtype::Bool => {
                for v in values {
                    data.push(u8::from(*v != 0.0));
                }
            }
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn element_count(&self) -> usize {
        self.data.len() / self.dtype.element_size()
    }

    pub fn raw_data(&self) -> &[u8] {
        &self.data
    }

    /// Decodes to f32. Half and double floats convert exactly or by rounding;
    /// integer and bool tensors are cast (used only for inspection stats).
    pub fn to_f32_vec(&self) -> Vec<f32> {
        let n = self.element_count();
        let mut out = Vec::with_capacity(n);
        match self.dtype {
            Dtype::F32 => {
                for c in self.data.chunks_exact(4) {
                    out.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
                }
            }
            Dtype::F64 => {
                for c in self.data.chunks_exact(8) {
                    out.push(f64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ]) as f32);
                }
            }
            Dtype::F16 => {
                for c in self.data.chunks_exact(2) {
                    out.push(half::f16::from_le_bytes([c[0], c[1]]).to_f32());
                }
            }
            Dtype::Bf16 => {
                for c in self.data.chunks_exact(2) {
                    out.push(half::bf16::from_le_bytes([c[0], c[1]]).to_f32());
                }
            }
            Dtype::I32 => {
                for c in self.data.chunks_exact(4) {
                    out.push(i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32);
                }
            }
            Dtype::I64 => {
                for c in self.data.chunks_exact(8) {
                    out.push(i64::from_le_bytes([
                        c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                    ]) as f32);
                }
            }
            Dtype::U8 => {
                for b in &self.data {
                    out.push(*b as f32);
                }
            }
            Dtype::Bool => {
                for b in &self.data {
                    out.push(f32::from(*b != 0));
                }
            }
        }
        out
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    let mut count: usize = 1;
    for &d in shape {
        count = count
            .checked_mul(d)
            .ok_or_else(|| Error::MalformedHeader("shape element count overflows".into()))?;
    }
    Ok(count)
}

/// An in-memory checkpoint: named tensors in lexicographic order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    header_metadata: Option<BTreeMap<String, String>>,
    source_path: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor. Names must be non-empty.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidConfig("tensor name must be non-empty".into()));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }

    pub fn header_metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.header_metadata.as_ref()
    }

    pub fn set_header_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.header_metadata = metadata;
    }

    /// Parses a checkpoint file.
    ///
    /// The payload must be tiled exactly by the declared tensor ranges:
    /// overlaps, gaps, and ranges past the end of the file are all rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut ckpt = Self::from_bytes(&bytes)?;
        ckpt.source_path = Some(path.to_path_buf());
        Ok(ckpt)
    }

    /// Parses checkpoint bytes (the file contents verbatim).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, too short for the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if header_len > MAX_HEADER_LEN {
            return Err(Error::MalformedHeader(format!(
                "header length {header_len} exceeds the {MAX_HEADER_LEN}-byte cap"
            )));
        }
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|end| *end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let header: BTreeMap<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..header_end])
                .map_err(|e| Error::MalformedHeader(format!("invalid JSON: {e}")))?;

        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        let mut header_metadata = None;
        let mut ranges: Vec<(u64, u64, String)> = Vec::new();

        for (name, value) in header {
            if name == "__metadata__" {
                let meta: BTreeMap<String, String> = serde_json::from_value(value)
                    .map_err(|e| Error::MalformedHeader(format!("invalid __metadata__: {e}")))?;
                header_metadata = Some(meta);
                continue;
            }
            if name.is_empty() {
                return Err(Error::MalformedHeader("empty tensor name".into()));
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("entry \"{name}\": {e}")))?;
            let dtype = Dtype::from_name(&entry.dtype)?;
            let [begin, end] = entry.data_offsets;
            if begin > end || end > payload.len() as u64 {
                return Err(Error::OverlappingOffsets(format!(
                    "tensor \"{name}\" declares [{begin}, {end}) but the payload is {} bytes",
                    payload.len()
                )));
            }
            let count = element_count(&entry.shape)?;
            let expected = count
                .checked_mul(dtype.element_size())
                .ok_or_else(|| Error::MalformedHeader(format!("tensor \"{name}\" overflows")))?;
            if (end - begin) as usize != expected {
                return Err(Error::MalformedHeader(format!(
                    "tensor \"{name}\" declares {} bytes but shape {:?} with dtype {} needs {}",
                    end - begin,
                    entry.shape,
                    dtype,
                    expected
                )));
            }
            ranges.push((begin, end, name.clone()));
            let data = payload[begin as usize..end as usize].to_vec();
            tensors.insert(name, Tensor { dtype, shape: entry.shape, data });
        }

        // The ranges must tile the payload exactly.
        ranges.sort();
        let mut cursor = 0u64;
        for (begin, end, name) in &ranges {
            if *begin != cursor {
                return Err(Error::OverlappingOffsets(format!(
                    "tensor \"{name}\" starts at {begin}, expected {cursor}"
                )));
            }
            cursor = *end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::OverlappingOffsets(format!(
                "payload is {} bytes but tensors cover only {cursor}",
                payload.len()
            )));
        }

        Ok(Checkpoint {
            tensors,
            header_metadata,
            source_path: None,
        })
    }

    /// Serializes to the canonical byte form: tensors in lexicographic name
    /// order, contiguous offsets, header padded with spaces to an 8-byte
    /// boundary. A pure function of the checkpoint contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if let Some(meta) = &self.header_metadata {
            header.insert(
                "__metadata__".to_string(),
                serde_json::to_value(meta).expect("string map serializes"),
            );
        }
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            let end = offset + tensor.data.len() as u64;
            let entry = HeaderEntry {
                dtype: tensor.dtype.name().to_string(),
                shape: tensor.shape.clone(),
                data_offsets: [offset, end],
            };
            header.insert(
                name.clone(),
                serde_json::to_value(&entry).expect("header entry serializes"),
            );
            offset = end;
        }
        // serde_json maps iterate in sorted key order, giving stable bytes.
        let mut header_bytes = serde_json::to_vec(&header).expect("header serializes");
        while (8 + header_bytes.len()) % 8 != 0 {
            header_bytes.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for tensor in self.tensors.values() {
            out.extend_from_slice(&tensor.data);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.to_bytes()).map_err(io_err)?;
        file.flush().map_err(io_err)?;
        Ok(())
    }
}
