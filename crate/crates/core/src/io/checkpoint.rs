//! Binary checkpoints.
//!
//! ```text
//! "MTRF" | version: u32 LE | header_len: u64 LE | JSON header | payload
//! ```
//!
//! The header carries the [`ModelConfig`] and a tensor directory. Offsets are
//! relative to the start of the payload, which holds little-endian `f32`
//! values, row-major, in directory order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{atomic_write, IoError, Result};
use crate::model::{expected_shapes, ModelParams};
use crate::{Float, Model, ModelConfig, Tensor};

pub const MAGIC: [u8; 4] = *b"MTRF";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    fn nbytes(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

/// The tensor directory a model of this shape would be written with.
pub fn directory(config: &ModelConfig) -> Vec<TensorEntry> {
    let mut offset = 0;
    expected_shapes(config)
        .named()
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry {
                name,
                dtype: "f32".into(),
                shape: shape.clone(),
                offset,
            };
            offset += e.nbytes();
            e
        })
        .collect()
}

/// Serializes a model; `f64` weights are rounded to `f32`.
pub fn encode_checkpoint<T: Float>(model: &Model<T>) -> Vec<u8> {
    let header = CheckpointHeader {
        config: model.config,
        tensors: directory(&model.config),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = model.params.iter().map(|t| t.numel() * 4).sum();
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(IoError::Truncated {
            field: "preamble",
            expected: PREAMBLE as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[..4] != MAGIC {
        return Err(IoError::BadMagic {
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = (PREAMBLE as u64).saturating_add(header_len);
    if end > bytes.len() as u64 {
        return Err(IoError::Truncated {
            field: "header",
            expected: end,
            actual: bytes.len() as u64,
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..end as usize])
        .map_err(|e| IoError::Header(e.to_string()))?;
    Ok((header, end as usize))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model<f32>> {
    let (header, start) = decode_header(bytes)?;
    let payload = &bytes[start..];
    let config = header.config;
    config.validate()?;
    let expected = directory(&config);
    if header.tensors.len() != expected.len() {
        return Err(IoError::Directory(format!(
            "{} tensors listed, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut cursor = 0u64;
    for (e, x) in header.tensors.iter().zip(&expected) {
        if e.name != x.name || e.shape != x.shape {
            return Err(IoError::Directory(format!(
                "entry {} {:?} where {} {:?} was expected",
                e.name, e.shape, x.name, x.shape
            )));
        }
        if e.dtype != "f32" {
            return Err(IoError::Directory(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset < cursor {
            return Err(IoError::Directory(format!("{}: offset {} overlaps previous tensor", e.name, e.offset)));
        }
        cursor = e.offset + e.nbytes();
        if cursor > payload.len() as u64 {
            return Err(IoError::Truncated {
                field: "payload",
                expected: cursor,
                actual: payload.len() as u64,
            });
        }
    }
    let mut it = header.tensors.iter();
    let params: ModelParams<Tensor<f32>> = expected_shapes(&config).try_map(|shape| {
        let e = it.next().expect("length checked");
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes()) as usize];
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Tensor::new(shape.clone(), data)
    })?;
    Ok(Model::from_params(config, params)?)
}

/// Writes atomically: a temporary file in the target directory is renamed
/// into place once complete.
pub fn save_checkpoint<T: Float>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model);
    atomic_write(path, |f| f.write_all(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode_checkpoint(&bytes)
}
