//! Single-file tensor container.
//!
//! Layout:
//!
//! ```text
//! [ u64 LE header length N ][ N bytes UTF-8 JSON header ][ data region ]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! with offsets relative to the start of the data region, plus an optional
//! `"__metadata__"` string map. Element bytes are row-major little-endian.
//!
//! Writes are canonical: `__metadata__` first (omitted when empty), then
//! tensors in lexicographic name order, data packed in the same order with
//! no padding. Equal stores therefore serialize to equal bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

const METADATA_KEY: &str = "__metadata__";

/// Upper bound on the declared header length. Anything larger is treated as
/// a corrupt length prefix rather than an allocation request.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensors {first:?} and {second:?} declare overlapping byte ranges")]
    OverlappingOffsets { first: String, second: String },
    #[error("truncated data: header declares {expected} data bytes, file holds {actual}")]
    TruncatedData { expected: u64, actual: u64 },
    #[error("unknown dtype {dtype:?} for tensor {name:?}")]
    UnknownDtype { name: String, dtype: String },
    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl StoreError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::IoFailure {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(other.to_string()),
        }
    }
}

/// A dense tensor: dtype, shape and raw little-endian element bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl Tensor {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let expected = numel(&shape)
            .checked_mul(dtype.size())
            .ok_or_else(|| invalid("<unnamed>", "element count overflows"))?;
        if data.len() != expected {
            return Err(invalid(
                "<unnamed>",
                format!("{} data bytes for shape {:?} of {}, expected {}", data.len(), shape, dtype, expected),
            ));
        }
        Ok(Tensor { dtype, shape, data })
    }

    /// Builds an F32 tensor from values. Panics if `values.len()` does not
    /// match the shape.
    pub fn from_f32(shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(numel(&shape), values.len(), "shape/value count mismatch");
        let mut data = Vec::with_capacity(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        Tensor {
            dtype: Dtype::F32,
            shape,
            data,
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    /// Element values widened to f32. Exact for every supported dtype.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self.dtype {
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => self
                .data
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => self
                .data
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        }
    }

    /// Encodes f32 values into `dtype`, rounding to nearest even.
    pub fn from_f32_as(shape: Vec<usize>, values: &[f32], dtype: Dtype) -> Cast {
        cast_tensor(&Tensor::from_f32(shape, values), dtype)
    }
}

/// Result of a dtype conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct Cast {
    pub tensor: Tensor,
    /// Finite source values that became ±infinity in the target dtype.
    pub overflowed: usize,
}

/// Converts `t` element-wise to `target`.
///
/// Narrowing conversions round to nearest, ties to even. F16 overflow
/// saturates to ±infinity and is counted in [`Cast::overflowed`]; upcasts
/// are exact.
pub fn cast_tensor(t: &Tensor, target: Dtype) -> Cast {
    if t.dtype == target {
        return Cast {
            tensor: t.clone(),
            overflowed: 0,
        };
    }
    let values = t.to_f32_vec();
    let mut overflowed = 0;
    let mut data = Vec::with_capacity(values.len() * target.size());
    for v in values {
        match target {
            Dtype::F32 => data.extend_from_slice(&v.to_le_bytes()),
            Dtype::F16 => {
                let h = f16::from_f32(v);
                if v.is_finite() && h.is_infinite() {
                    overflowed += 1;
                }
                data.extend_from_slice(&h.to_le_bytes());
            }
            Dtype::BF16 => {
                let h = bf16::from_f32(v);
                if v.is_finite() && h.is_infinite() {
                    overflowed += 1;
                }
                data.extend_from_slice(&h.to_le_bytes());
            }
        }
    }
    Cast {
        tensor: Tensor {
            dtype: target,
            shape: t.shape.clone(),
            data,
        },
        overflowed,
    }
}

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TensorStore {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Option<Tensor>> {
        let name = name.into();
        validate_name(&name)?;
        Ok(self.tensors.insert(name, tensor))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensors in canonical (lexicographic) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Total element bytes across all tensors.
    pub fn data_len(&self) -> u64 {
        self.tensors.values().map(|t| t.data.len() as u64).sum()
    }

    /// Canonical serialized form.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_json();
        let mut out = Vec::with_capacity(8 + header.len() + self.data_len() as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    fn header_json(&self) -> String {
        let mut parts = Vec::with_capacity(self.tensors.len() + 1);
        if !self.metadata.is_empty() {
            let meta = serde_json::to_string(&self.metadata).expect("string map serializes");
            parts.push(format!("{}:{}", json_str(METADATA_KEY), meta));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = offset + t.data.len();
            let shape = serde_json::to_string(&t.shape).expect("usize list serializes");
            parts.push(format!(
                "{}:{{\"dtype\":\"{}\",\"shape\":{},\"data_offsets\":[{},{}]}}",
                json_str(name),
                t.dtype,
                shape,
                offset,
                end
            ));
            offset = end;
        }
        format!("{{{}}}", parts.join(","))
    }

    /// Parses a container from bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(StoreError::MalformedHeader(format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if n > MAX_HEADER_LEN || n > (bytes.len() - 8) as u64 {
            return Err(StoreError::MalformedHeader(format!(
                "length prefix {} exceeds available {} bytes",
                n,
                bytes.len() - 8
            )));
        }
        let header_end = 8 + n as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| StoreError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let root: Value = serde_json::from_str(header)
            .map_err(|e| StoreError::MalformedHeader(format!("header is not JSON: {e}")))?;
        let Value::Object(entries) = root else {
            return Err(StoreError::MalformedHeader("header is not a JSON object".into()));
        };
        let data = &bytes[header_end..];

        let mut store = TensorStore::new();
        let mut spans: Vec<(u64, u64, String)> = Vec::with_capacity(entries.len());
        for (name, entry) in entries {
            if name == METADATA_KEY {
                store.metadata = parse_metadata(entry)?;
                continue;
            }
            validate_name(&name)?;
            let info = parse_entry(&name, &entry)?;
            spans.push((info.begin, info.end, name.clone()));
            store.tensors.insert(
                name,
                Tensor {
                    dtype: info.dtype,
                    shape: info.shape,
                    data: Vec::new(),
                },
            );
        }

        spans.sort();
        let mut cursor = 0u64;
        let mut prev: Option<&str> = None;
        for (begin, end, name) in &spans {
            if *begin < cursor {
                return Err(StoreError::OverlappingOffsets {
                    first: prev.unwrap_or_default().to_string(),
                    second: name.clone(),
                });
            }
            if *begin > cursor {
                return Err(StoreError::MalformedHeader(format!(
                    "gap in data region before tensor {name:?} ({cursor}..{begin})"
                )));
            }
            cursor = *end;
            prev = Some(name);
        }
        let actual = data.len() as u64;
        if cursor > actual {
            return Err(StoreError::TruncatedData {
                expected: cursor,
                actual,
            });
        }
        if cursor < actual {
            return Err(StoreError::MalformedHeader(format!(
                "{} trailing bytes after the last tensor",
                actual - cursor
            )));
        }
        for (begin, end, name) in spans {
            let t = store.tensors.get_mut(&name).expect("inserted above");
            t.data = data[begin as usize..end as usize].to_vec();
        }
        Ok(store)
    }
}

struct EntryInfo {
    dtype: Dtype,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

fn parse_entry(name: &str, entry: &Value) -> Result<EntryInfo> {
    let malformed = |what: &str| StoreError::MalformedHeader(format!("tensor {name:?}: {what}"));
    let obj = entry.as_object().ok_or_else(|| malformed("entry is not an object"))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string \"dtype\""))?;
    let dtype: Dtype = dtype_str.parse().map_err(|d| StoreError::UnknownDtype {
        name: name.to_string(),
        dtype: d,
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array \"shape\""))?
        .iter()
        .map(|v| v.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed("shape entries must be non-negative integers"))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array \"data_offsets\""))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(malformed("data_offsets must have two entries"));
    };
    let (Some(begin), Some(end)) = (begin.as_u64(), end.as_u64()) else {
        return Err(malformed("data_offsets must be non-negative integers"));
    };
    if begin > end {
        return Err(malformed("data_offsets begin exceeds end"));
    }
    let expected = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .ok_or_else(|| malformed("element count overflows"))?;
    if end - begin != expected {
        return Err(malformed(&format!(
            "byte span {} does not match shape {:?} of {} ({} bytes)",
            end - begin,
            shape,
            dtype,
            expected
        )));
    }
    Ok(EntryInfo {
        dtype,
        shape,
        begin,
        end,
    })
}

fn parse_metadata(entry: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = entry else {
        return Err(StoreError::MalformedHeader("__metadata__ is not an object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(StoreError::MalformedHeader(format!(
                "__metadata__ value for {k:?} is not a string: {other}"
            ))),
        })
        .collect()
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(invalid(name, "empty tensor name"));
    }
    if name.contains('\0') {
        return Err(invalid(name, "tensor name contains NUL"));
    }
    if name == METADATA_KEY {
        return Err(invalid(name, "reserved name"));
    }
    Ok(())
}

fn invalid(name: &str, reason: impl Into<String>) -> StoreError {
    StoreError::InvalidTensor {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn read_store(path: impl AsRef<Path>) -> Result<TensorStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    TensorStore::from_bytes(&bytes)
}

/// Writes the canonical form of `store` to `path`.
pub fn write_store(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = store.to_bytes();
    let mut f = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| StoreError::io(path, e))?;
    f.sync_all().map_err(|e| StoreError::io(path, e))
}
