//! The `ATNF` model container.
//!
//! ```text
//! "ATNF" | version: u8 | header_len: u32 LE | header (JSON) | payload
//! ```
//!
//! The header carries the [`ModelSpec`] and a tensor table; offsets are
//! relative to the start of the payload. `F32` tensors are stored as
//! little-endian IEEE floats, `INT8` tensors as one byte per value with
//! their affine metadata in the table.

use std::fs;
use std::path::Path;

use atnf_core::model::{Model, ModelSpec};
use atnf_core::quant::{QuantTensor, QuantizedModel};
use atnf_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"ATNF";
pub const VERSION: u8 = 1;
const PREAMBLE: usize = 4 + 1 + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    INT8,
}

impl DType {
    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::INT8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub length: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_point: Option<i8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StoredModel {
    Float(Model),
    Quantized(QuantizedModel),
}

impl StoredModel {
    pub fn spec(&self) -> &ModelSpec {
        match self {
            Self::Float(m) => m.spec(),
            Self::Quantized(q) => q.spec(),
        }
    }

    /// A runnable model; quantized weights are dequantized.
    pub fn into_model(self) -> Result<Model> {
        match self {
            Self::Float(m) => Ok(m),
            Self::Quantized(q) => Ok(q.dequantize()?),
        }
    }
}

/// Byte counts of an encoded file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileSize {
    pub header: u64,
    pub payload: u64,
    pub total: u64,
}

fn assemble(spec: &ModelSpec, tensors: Vec<TensorEntry>, payload: Vec<u8>) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        spec: spec.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in model.named_tensors() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: DType::F32,
            offset,
            length: payload.len() as u64 - offset,
            scale: None,
            zero_point: None,
            constant: None,
        });
    }
    assemble(model.spec(), entries, payload)
}

pub fn encode_quantized(q: &QuantizedModel) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in q.tensors() {
        let offset = payload.len() as u64;
        payload.extend(t.q.iter().map(|&v| v as u8));
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            dtype: DType::INT8,
            offset,
            length: t.q.len() as u64,
            scale: Some(t.scale),
            zero_point: Some(t.zero_point),
            constant: t.constant,
        });
    }
    assemble(q.spec(), entries, payload)
}

pub fn encode(m: &StoredModel) -> Vec<u8> {
    match m {
        StoredModel::Float(m) => encode_model(m),
        StoredModel::Quantized(q) => encode_quantized(q),
    }
}

/// Parses the preamble and header and checks the tensor table against the
/// payload, without decoding any tensor.
pub fn read_header(bytes: &[u8]) -> Result<(Header, FileSize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    let truncated = |needed: usize| Error::Truncated {
        needed: needed as u64,
        available: bytes.len() as u64,
    };
    let &version = bytes.get(4).ok_or_else(|| truncated(PREAMBLE))?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let len_bytes: [u8; 4] = bytes.get(5..PREAMBLE).ok_or_else(|| truncated(PREAMBLE))?.try_into().unwrap();
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let payload_start = PREAMBLE + header_len;
    let header_bytes = bytes.get(PREAMBLE..payload_start).ok_or_else(|| truncated(payload_start))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::MalformedHeader(e.to_string()))?;

    let payload_len = (bytes.len() - payload_start) as u64;
    let mut spans = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let numel: usize = t.shape.iter().product();
        if t.shape.is_empty() || numel == 0 {
            return Err(Error::MalformedHeader(format!("{} has empty shape {:?}", t.name, t.shape)));
        }
        if t.length != (numel * t.dtype.width()) as u64 {
            return Err(Error::MalformedHeader(format!(
                "{}: length {} does not match shape {:?} as {:?}",
                t.name, t.length, t.shape, t.dtype
            )));
        }
        if t.dtype == DType::INT8 && (t.scale.is_none() || t.zero_point.is_none()) {
            return Err(Error::MalformedHeader(format!("{}: int8 tensor lacks scale or zero point", t.name)));
        }
        let end = t
            .offset
            .checked_add(t.length)
            .ok_or_else(|| Error::MalformedHeader(format!("{}: offset overflow", t.name)))?;
        if end > payload_len {
            return Err(Error::Truncated {
                needed: payload_start as u64 + end,
                available: bytes.len() as u64,
            });
        }
        spans.push((t.offset, end, &t.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::OverlappingOffsets {
                first: w[0].2.clone(),
                second: w[1].2.clone(),
            });
        }
    }
    let size = FileSize {
        header: payload_start as u64,
        payload: payload_len,
        total: bytes.len() as u64,
    };
    Ok((header, size))
}

pub fn decode(bytes: &[u8]) -> Result<StoredModel> {
    let (header, size) = read_header(bytes)?;
    let payload = &bytes[size.header as usize..];
    let dtypes: Vec<DType> = header.tensors.iter().map(|t| t.dtype).collect();
    let quantized = match dtypes.first() {
        Some(&d) if dtypes.iter().all(|&x| x == d) => d == DType::INT8,
        Some(_) => return Err(Error::MalformedHeader("mixed tensor dtypes".into())),
        None => false,
    };
    let raw = |t: &TensorEntry| &payload[t.offset as usize..(t.offset + t.length) as usize];
    if quantized {
        let tensors = header
            .tensors
            .iter()
            .map(|t| {
                let q = QuantTensor {
                    shape: t.shape.clone(),
                    q: raw(t).iter().map(|&b| b as i8).collect(),
                    scale: t.scale.unwrap(),
                    zero_point: t.zero_point.unwrap(),
                    constant: t.constant,
                };
                (t.name.clone(), q)
            })
            .collect();
        let q = QuantizedModel::new(header.spec, tensors)?;
        // Names and shapes must fit the architecture.
        q.dequantize()?;
        Ok(StoredModel::Quantized(q))
    } else {
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let data = raw(t).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
        }
        Ok(StoredModel::Float(Model::from_params(header.spec, tensors)?))
    }
}

pub fn save(path: &Path, model: &StoredModel) -> Result<FileSize> {
    let bytes = encode(model);
    write_atomic(path, &bytes)?;
    Ok(read_header(&bytes)?.1)
}

pub fn load(path: &Path) -> Result<StoredModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
