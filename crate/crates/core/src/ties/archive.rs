//! Reader and writer for the safetensors on-disk layout.
//!
//! ```text
//! [u64 LE header length][JSON header][payload bytes]
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, data_offsets}`, with
//! offsets relative to the start of the payload. An optional `__metadata__`
//! entry holds a string-to-string map. F16 and BF16 payloads are widened to
//! F32 on read; the writer always emits F32, tensors sorted by name and laid
//! out contiguously.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";
const WIDENED_KEY: &str = "dialect_mbr.widened";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F16" => Some(Dtype::F16),
            "BF16" => Some(Dtype::BF16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        })
    }
}

/// A dense row-major tensor held as F32.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    /// Dtype the values were stored with on disk.
    source_dtype: Dtype,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, ArchiveError> {
        if shape.contains(&0) {
            return Err(ArchiveError::InvalidShape { name: String::new(), shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ArchiveError::LengthMismatch {
                name: String::new(),
                expected: numel,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data, source_dtype: Dtype::F32 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn source_dtype(&self) -> Dtype {
        self.source_dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorArchive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("file is {0} bytes, too short for the 8-byte header length")]
    TooShort(usize),
    #[error("header declares {declared} bytes but only {available} follow the length prefix")]
    TruncatedHeader { declared: u64, available: u64 },
    #[error("header is not valid UTF-8")]
    HeaderEncoding,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("malformed __metadata__: {0}")]
    MalformedMetadata(String),
    #[error("duplicate tensor name `{0}` in header")]
    DuplicateName(String),
    #[error("tensor `{name}`: invalid entry: {reason}")]
    InvalidEntry { name: String, reason: String },
    #[error("tensor `{name}`: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor `{name}`: shape {shape:?} has a zero dimension")]
    InvalidShape { name: String, shape: Vec<usize> },
    #[error("tensor `{name}`: data_offsets [{start}, {end}] are reversed")]
    InvalidOffsets { name: String, start: usize, end: usize },
    #[error("tensor `{name}`: extent [{start}, {end}) lies beyond the {available}-byte payload")]
    OutOfBounds { name: String, start: usize, end: usize, available: usize },
    #[error("tensor `{name}`: payload truncated, extent ends at {end} but only {available} bytes present")]
    TruncatedPayload { name: String, end: usize, available: usize },
    #[error("tensor `{name}`: expected {expected} elements, extent holds {actual}")]
    LengthMismatch { name: String, expected: usize, actual: usize },
    #[error("tensors `{first}` and `{second}` have overlapping extents")]
    Overlap { first: String, second: String },
}

#[derive(Debug, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Top-level header object, preserving duplicate keys.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object mapping tensor names to entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(HeaderEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<TensorArchive, ArchiveError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ArchiveError::Io { path: path.display().to_string(), source })?;
    parse_archive(&bytes)
}

pub fn parse_archive(bytes: &[u8]) -> Result<TensorArchive, ArchiveError> {
    if bytes.len() < 8 {
        return Err(ArchiveError::TooShort(bytes.len()));
    }
    let declared = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if declared > available || declared > MAX_HEADER_LEN {
        return Err(ArchiveError::TruncatedHeader { declared, available });
    }
    let header_end = 8 + declared as usize;
    let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|_| ArchiveError::HeaderEncoding)?;
    let payload = &bytes[header_end..];

    let HeaderEntries(entries) =
        serde_json::from_str(header).map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;

    let mut archive = TensorArchive::new();
    let mut seen_metadata = false;
    let mut extents: Vec<(usize, usize, String)> = Vec::new();
    let mut widened: Vec<String> = Vec::new();

    for (name, value) in entries {
        if name == METADATA_KEY {
            if seen_metadata {
                return Err(ArchiveError::DuplicateName(name));
            }
            seen_metadata = true;
            archive.metadata = serde_json::from_value(value)
                .map_err(|e| ArchiveError::MalformedMetadata(e.to_string()))?;
            continue;
        }
        if archive.tensors.contains_key(&name) {
            return Err(ArchiveError::DuplicateName(name));
        }
        let raw: RawEntry = serde_json::from_value(value)
            .map_err(|e| ArchiveError::InvalidEntry { name: name.clone(), reason: e.to_string() })?;
        let dtype = Dtype::parse(&raw.dtype)
            .ok_or_else(|| ArchiveError::UnsupportedDtype { name: name.clone(), dtype: raw.dtype.clone() })?;
        if raw.shape.contains(&0) {
            return Err(ArchiveError::InvalidShape { name, shape: raw.shape });
        }
        let [start, end] = raw.data_offsets;
        if start > end {
            return Err(ArchiveError::InvalidOffsets { name, start, end });
        }
        if end > payload.len() {
            return Err(if start < payload.len() {
                ArchiveError::TruncatedPayload { name, end, available: payload.len() }
            } else {
                ArchiveError::OutOfBounds { name, start, end, available: payload.len() }
            });
        }
        let numel = raw
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ArchiveError::InvalidEntry { name: name.clone(), reason: "shape overflows".into() })?;
        let expected_bytes = numel.checked_mul(dtype.size());
        if expected_bytes != Some(end - start) {
            return Err(ArchiveError::LengthMismatch {
                name,
                expected: numel,
                actual: (end - start) / dtype.size(),
            });
        }
        let data = decode(&payload[start..end], dtype);
        if dtype != Dtype::F32 {
            widened.push(format!("{name}:{dtype}"));
        }
        extents.push((start, end, name.clone()));
        archive.tensors.insert(name, Tensor { shape: raw.shape, data, source_dtype: dtype });
    }

    extents.sort();
    for pair in extents.windows(2) {
        let (_, prev_end, ref first) = pair[0];
        let (next_start, _, ref second) = pair[1];
        if next_start < prev_end {
            return Err(ArchiveError::Overlap { first: first.clone(), second: second.clone() });
        }
    }

    if !widened.is_empty() {
        widened.sort();
        archive.metadata.insert(WIDENED_KEY.into(), widened.join(","));
    }
    Ok(archive)
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f32> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

/// Serializes the archive; all tensors become F32.
pub fn serialize_archive(archive: &TensorArchive) -> Vec<u8> {
    let mut header = serde_json::Map::new();
    if !archive.metadata.is_empty() {
        let meta = archive
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.into(), Value::Object(meta));
    }
    let mut offset = 0usize;
    for (name, tensor) in &archive.tensors {
        let len = tensor.data.len() * 4;
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "F32",
                "shape": tensor.shape,
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in archive.tensors.values() {
        for v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_archive(archive: &TensorArchive, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    let path = path.as_ref();
    let io_err = |source| ArchiveError::Io { path: path.display().to_string(), source };
    let bytes = serialize_archive(archive);
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&bytes).map_err(io_err)?;
    file.sync_all().map_err(io_err)
}

/// Byte range of the payload within a serialized archive.
pub fn payload_range(bytes: &[u8]) -> Option<std::ops::Range<usize>> {
    let len = u64::from_le_bytes(bytes.get(..8)?.try_into().ok()?) as usize;
    let start = 8usize.checked_add(len)?;
    (start <= bytes.len()).then_some(start..bytes.len())
}
