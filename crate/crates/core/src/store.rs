//! Per-layer exact nearest-neighbour memory over router inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GatingVector;
use crate::model::MoeModel;

/// Most keys looked at when estimating the RBF bandwidth.
pub const GAMMA_SAMPLE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `exp(-γ‖x−k‖²)`.
    Rbf,
    /// `max(0, cos(x, k))`.
    Cosine,
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rbf" => Ok(Kernel::Rbf),
            "cosine" => Ok(Kernel::Cosine),
            other => Err(Error::Config(format!("unknown kernel {other:?} (rbf | cosine)"))),
        }
    }
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kernel::Rbf => "rbf",
            Kernel::Cosine => "cosine",
        })
    }
}

/// Kernel choice plus an optional fixed γ; `None` estimates γ from the keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityConfig {
    pub kernel: Kernel,
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Rbf,
            gamma: None,
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Similarity in `[0, 1]` under `kernel`.
pub fn similarity(x: &[f64], key: &[f64], kernel: Kernel, gamma: f64) -> f64 {
    match kernel {
        Kernel::Rbf => (-gamma * squared_distance(x, key)).exp(),
        Kernel::Cosine => {
            let dot: f64 = x.iter().zip(key).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nk = key.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || nk == 0.0 {
                return 0.0;
            }
            (dot / (nx * nk)).clamp(0.0, 1.0)
        }
    }
}

/// RBF bandwidth `1/(2·d̄²)` with `d̄` the mean distance from up to
/// [`GAMMA_SAMPLE`] evenly strided keys to their nearest other key.
/// Returns `1.0` for a single key or when `d̄` is zero.
pub fn estimate_gamma(keys: &[f64], dim: usize) -> f64 {
    let m = keys.len().checked_div(dim).unwrap_or(0);
    if m <= 1 {
        return 1.0;
    }
    let row = |i: usize| &keys[i * dim..(i + 1) * dim];
    let samples = m.min(GAMMA_SAMPLE);
    let total: f64 = (0..samples)
        .map(|s| {
            let i = s * m / samples;
            (0..m)
                .filter(|&j| j != i)
                .map(|j| squared_distance(row(i), row(j)))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    let mean = total / samples as f64;
    if mean == 0.0 || !mean.is_finite() {
        1.0
    } else {
        1.0 / (2.0 * mean * mean)
    }
}

/// Result of a query, sorted by ascending distance (ties by row id).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSet {
    pub indices: Vec<usize>,
    /// Squared L2 distances.
    pub distances: Vec<f64>,
    pub similarities: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Keys and gating values of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMemory {
    layer: usize,
    dim: usize,
    num_experts: usize,
    keys: Vec<f64>,
    values: Vec<GatingVector>,
    kernel: Kernel,
    gamma: f64,
}

impl LayerMemory {
    /// `keys` is row-major `M×dim`; γ is estimated unless `similarity.gamma` is set.
    pub fn new(
        layer: usize,
        dim: usize,
        num_experts: usize,
        keys: Vec<f64>,
        values: Vec<GatingVector>,
        similarity: SimilarityConfig,
    ) -> Result<Self> {
        if dim == 0 || keys.len() != values.len() * dim {
            return Err(Error::mismatch("memory key length", values.len() * dim, keys.len()));
        }
        if let Some(v) = values.iter().find(|v| v.len() != num_experts) {
            return Err(Error::mismatch("memory value length", num_experts, v.len()));
        }
        if keys.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("memory keys of layer {layer}"),
            });
        }
        let gamma = match similarity.gamma {
            Some(g) if g > 0.0 && g.is_finite() => g,
            Some(g) => return Err(Error::Config(format!("gamma must be positive, got {g}"))),
            None => estimate_gamma(&keys, dim),
        };
        Ok(Self {
            layer,
            dim,
            num_experts,
            keys,
            values,
            kernel: similarity.kernel,
            gamma,
        })
    }

    pub fn empty(layer: usize, dim: usize, num_experts: usize, kernel: Kernel) -> Self {
        Self {
            layer,
            dim,
            num_experts,
            keys: Vec::new(),
            values: Vec::new(),
            kernel,
            gamma: 1.0,
        }
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn value(&self, i: usize) -> &GatingVector {
        &self.values[i]
    }

    pub fn values(&self) -> &[GatingVector] {
        &self.values
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same entries with another kernel and γ.
    pub fn with_similarity(&self, similarity: SimilarityConfig) -> Result<Self> {
        Self::new(
            self.layer,
            self.dim,
            self.num_experts,
            self.keys.clone(),
            self.values.clone(),
            similarity,
        )
    }

    /// Exact `min(k, M)` nearest keys by squared L2 distance. An empty memory
    /// returns an empty set.
    pub fn query(&self, x: &[f64], k: usize) -> Result<NeighborSet> {
        if x.len() != self.dim {
            return Err(Error::mismatch("query dimension", self.dim, x.len()));
        }
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len()).map(|i| (squared_distance(x, self.key(i)), i)).collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(NeighborSet::default());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(NeighborSet {
            similarities: scored
                .iter()
                .map(|&(_, i)| similarity(x, self.key(i), self.kernel, self.gamma))
                .collect(),
            distances: scored.iter().map(|s| s.0).collect(),
            indices: scored.into_iter().map(|s| s.1).collect(),
        })
    }
}

/// One memory per MoE layer, tied to the checkpoint it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySet {
    pub fingerprint: String,
    pub model_dim: usize,
    pub num_experts: usize,
    pub active_experts: usize,
    pub layers: Vec<LayerMemory>,
}

impl MemorySet {
    /// A memory with no entries for every MoE layer of `model`.
    pub fn empty(model: &MoeModel, fingerprint: String, kernel: Kernel) -> Self {
        let c = model.config();
        Self {
            fingerprint,
            model_dim: c.model_dim,
            num_experts: c.num_experts,
            active_experts: c.active_experts,
            layers: c
                .moe_layers
                .iter()
                .map(|&l| LayerMemory::empty(l, c.model_dim, c.num_experts, kernel))
                .collect(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerMemory> {
        self.layers.iter().find(|m| m.layer == layer)
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerMemory::len).sum()
    }

    /// Errors unless the memory was built for a model with these dimensions
    /// and, when given, this fingerprint.
    pub fn check_compatible(&self, model: &MoeModel, fingerprint: Option<&str>) -> Result<()> {
        let c = model.config();
        if self.model_dim != c.model_dim {
            return Err(Error::mismatch("memory model_dim", c.model_dim, self.model_dim));
        }
        if self.num_experts != c.num_experts {
            return Err(Error::mismatch("memory num_experts", c.num_experts, self.num_experts));
        }
        if self.active_experts != c.active_experts {
            return Err(Error::mismatch("memory active_experts", c.active_experts, self.active_experts));
        }
        let layers: Vec<usize> = self.layers.iter().map(|m| m.layer).collect();
        if layers != c.moe_layers {
            return Err(Error::mismatch(
                "memory layers",
                format!("{:?}", c.moe_layers),
                format!("{layers:?}"),
            ));
        }
        if let Some(fp) = fingerprint {
            if fp != self.fingerprint {
                return Err(Error::mismatch("model fingerprint", fp, &self.fingerprint));
            }
        }
        Ok(())
    }

    /// Same entries with every layer's similarity replaced.
    pub fn with_similarity(&self, similarity: SimilarityConfig) -> Result<Self> {
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|m| m.with_similarity(similarity))
                .collect::<Result<_>>()?,
            ..self.clone()
        })
    }
}
