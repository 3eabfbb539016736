//! `.dpw` weight container.
//!
//! ```text
//! 0..4        magic "DPW1"
//! 4..8        u32 LE header length H
//! 8..8+H      UTF-8 JSON {config, tensors: [{name, dtype, shape, offset, length_bytes}]}
//! 8+H..       row-major f32 LE payloads; `offset` is relative to the payload start
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Params};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 4] = b"DPW1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    length_bytes: usize,
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in model.params.tensors() {
        let offset = payload.len();
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            dtype: "f32".into(),
            shape,
            offset,
            length_bytes: data.len() * 4,
        });
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 8 {
        return Err(CheckpointError::TruncatedHeader(bytes.len()).into());
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic }.into());
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(CheckpointError::TruncatedHeader(bytes.len()).into());
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[8 + hlen..];

    let mut params: Params<f32> = Params::zeros(&header.config);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    for ((name, shape), (_, dst)) in expected.iter().zip(params.tensors_mut()) {
        let entry = header
            .tensors
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor {
                tensor: name.clone(),
            })?;
        if entry.dtype != "f32" {
            return Err(CheckpointError::UnsupportedDtype {
                tensor: name.clone(),
                dtype: entry.dtype.clone(),
            }
            .into());
        }
        let needed = shape.iter().product::<usize>() * 4;
        let mismatch = || CheckpointError::ShapeMismatch {
            tensor: name.clone(),
            expected: shape.clone(),
            declared: entry.shape.clone(),
            length_bytes: entry.length_bytes,
        };
        if &entry.shape != shape {
            return Err(mismatch().into());
        }
        if entry.length_bytes < needed {
            return Err(CheckpointError::Truncated {
                tensor: name.clone(),
                needed,
                available: entry.length_bytes,
            }
            .into());
        }
        if entry.length_bytes > needed {
            return Err(mismatch().into());
        }
        let end = entry.offset.saturating_add(needed);
        if end > payload.len() {
            return Err(CheckpointError::Truncated {
                tensor: name.clone(),
                needed,
                available: payload.len().saturating_sub(entry.offset),
            }
            .into());
        }
        for (i, (d, chunk)) in dst
            .iter_mut()
            .zip(payload[entry.offset..end].chunks_exact(4))
            .enumerate()
        {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(CheckpointError::NonFinite {
                    tensor: name.clone(),
                    index: i,
                }
                .into());
            }
            *d = v;
        }
    }
    Ok(Model {
        config: header.config,
        params,
    })
}

pub fn save_model(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(Error::from)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    from_bytes(&std::fs::read(path)?)
}
