//! Memory file: `"MOEMEM1\0"`, a `u64` little-endian header length, a UTF-8
//! JSON header, then per layer the keys as little-endian `f32` rows followed
//! by each value as a `u16` count and that many `(u16 expert, f32 weight)`
//! pairs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GatingVector;
use crate::store::{Kernel, LayerMemory, MemorySet, SimilarityConfig};

pub const MEMORY_MAGIC: &[u8; 8] = b"MOEMEM1\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    layer: usize,
    entries: usize,
    gamma: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    fingerprint: String,
    model_dim: usize,
    num_experts: usize,
    active_experts: usize,
    kernel: Kernel,
    layers: Vec<LayerHeader>,
}

pub fn encode_memory(memory: &MemorySet) -> Result<Vec<u8>> {
    let kernel = memory.layers.first().map_or(Kernel::Rbf, LayerMemory::kernel);
    if memory.layers.iter().any(|m| m.kernel() != kernel) {
        return Err(Error::Invalid("all layers of a memory file share one kernel".into()));
    }
    if memory.num_experts > u16::MAX as usize + 1 {
        return Err(Error::Invalid("too many experts for u16 indices".into()));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        fingerprint: memory.fingerprint.clone(),
        model_dim: memory.model_dim,
        num_experts: memory.num_experts,
        active_experts: memory.active_experts,
        kernel,
        layers: memory
            .layers
            .iter()
            .map(|m| LayerHeader {
                layer: m.layer(),
                entries: m.len(),
                gamma: m.gamma(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MEMORY_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in &memory.layers {
        for &k in m.keys() {
            out.extend_from_slice(&(k as f32).to_le_bytes());
        }
        for v in m.values() {
            // weights that underflow f32 are dropped rather than stored as zeros
            let support: Vec<(usize, f32)> = v
                .support()
                .into_iter()
                .map(|(i, w)| (i, w as f32))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            out.extend_from_slice(&(support.len() as u16).to_le_bytes());
            for (i, w) in support {
                out.extend_from_slice(&(i as u16).to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_memory(memory: &MemorySet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_memory(memory)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_memory(path: impl AsRef<Path>) -> Result<MemorySet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_memory(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated {
            path: self.path.to_path_buf(),
            detail: what.to_string(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
    }
}

pub fn decode_memory(bytes: &[u8], path: &Path) -> Result<MemorySet> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut cur = Cursor { bytes, pos: 0, path };
    let magic = cur.take(8, "missing magic")?;
    if magic != MEMORY_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(MEMORY_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let len = u64::from_le_bytes(cur.take(8, "missing header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(cur.take(len, "header")?).map_err(|e| format(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::mismatch("memory format version", FORMAT_VERSION, header.format_version));
    }
    let (d, n) = (header.model_dim, header.num_experts);
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let what = format!("layer {} payload", lh.layer);
        let mut keys = Vec::with_capacity(lh.entries * d);
        for _ in 0..lh.entries * d {
            keys.push(cur.f32(&what)?);
        }
        let mut values = Vec::with_capacity(lh.entries);
        for _ in 0..lh.entries {
            let count = cur.u16(&what)? as usize;
            let mut pairs = Vec::with_capacity(count);
            for _ in 0..count {
                let i = cur.u16(&what)? as usize;
                let w = cur.f32(&what)?;
                pairs.push((i, w));
            }
            values.push(GatingVector::from_sparse(n, &pairs).map_err(|e| format(format!("{what}: {e}")))?);
        }
        let sim = SimilarityConfig {
            kernel: header.kernel,
            gamma: Some(lh.gamma),
        };
        layers.push(LayerMemory::new(lh.layer, d, n, keys, values, sim)?);
    }
    if cur.pos != bytes.len() {
        return Err(format(format!("{} trailing bytes after payload", bytes.len() - cur.pos)));
    }
    Ok(MemorySet {
        fingerprint: header.fingerprint,
        model_dim: d,
        num_experts: n,
        active_experts: header.active_experts,
        layers,
    })
}
