//! Checkpoint file: `"MOEKNN1\0"`, a `u64` little-endian header length, a
//! UTF-8 JSON header `{format_version, config, tensors: [{name, shape, dtype}]}`,
//! then each tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use memrouter_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Layout, MoeModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOEKNN1\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Serialises `model` to the checkpoint byte layout.
pub fn encode_checkpoint(model: &MoeModel) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors: model
            .param_names()
            .zip(model.params())
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = model.num_parameters() * 4;
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MoeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub(crate) fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<MoeModel> {
    let truncated = |detail: &str| Error::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(truncated("missing magic"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or_else(|| truncated("missing header length"))?
        .try_into()
        .expect("8 bytes");
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated("header extends past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| format(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::mismatch("checkpoint format version", FORMAT_VERSION, header.format_version));
    }
    header.config.validate()?;

    let layout = Layout::new(&header.config);
    if header.tensors.len() != layout.entries.len() {
        return Err(Error::mismatch("tensor count", layout.entries.len(), header.tensors.len()));
    }
    let mut offset = header_end;
    let mut params = Vec::with_capacity(layout.entries.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&layout.entries) {
        if &entry.name != name {
            return Err(Error::mismatch("tensor name", name, &entry.name));
        }
        if &entry.shape != shape {
            return Err(Error::mismatch(
                format!("shape of {name}"),
                format!("{shape:?}"),
                format!("{:?}", entry.shape),
            ));
        }
        if entry.dtype != "f32" {
            return Err(Error::mismatch(format!("dtype of {name}"), "f32", &entry.dtype));
        }
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| truncated(&format!("payload of {name}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.push(Tensor::new(shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(format(format!("{} trailing bytes after payload", bytes.len() - offset)));
    }
    MoeModel::from_parts(header.config, params)
}

/// Short content hash of the model's checkpoint encoding.
pub fn fingerprint(model: &MoeModel) -> Result<String> {
    let bytes = encode_checkpoint(model)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}
