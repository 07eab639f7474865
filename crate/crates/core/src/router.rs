//! Confidence-weighted fusion of the parametric gating with the memory's
//! proposal.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::gating::{pi, GatingVector};
use crate::model::{Directive, MoeModel, RoutingPolicy};
use crate::store::{LayerMemory, MemorySet, NeighborSet};

/// Similarity-weighted mean of the neighbours' values, or `None` when every
/// similarity is zero (or there are no neighbours).
pub fn aggregate_neighbors(neighbors: &NeighborSet, values: &[GatingVector]) -> Result<Option<GatingVector>> {
    if neighbors.len() != values.len() {
        return Err(Error::mismatch("neighbour values", neighbors.len(), values.len()));
    }
    let total: f64 = neighbors.similarities.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return Ok(None);
    }
    let n = values[0].len();
    let mut out = vec![0.0; n];
    for (s, v) in neighbors.similarities.iter().zip(values) {
        if v.len() != n {
            return Err(Error::mismatch("neighbour value length", n, v.len()));
        }
        let w = s / total;
        for (o, x) in out.iter_mut().zip(v.weights()) {
            *o += w * x;
        }
    }
    Ok(Some(GatingVector::from_raw(out)))
}

/// Mean similarity over the returned neighbours; zero for none.
pub fn confidence(neighbors: &NeighborSet) -> f64 {
    if neighbors.is_empty() {
        0.0
    } else {
        neighbors.similarities.iter().sum::<f64>() / neighbors.len() as f64
    }
}

/// `(1−λ)·a + λ·a_mem`.
pub fn mix(a: &GatingVector, a_mem: &GatingVector, lambda: f64) -> Result<GatingVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if a.len() != a_mem.len() {
        return Err(Error::mismatch("gating length", a.len(), a_mem.len()));
    }
    let w = a
        .weights()
        .iter()
        .zip(a_mem.weights())
        .map(|(p, m)| (1.0 - lambda) * p + lambda * m)
        .collect();
    Ok(GatingVector::from_raw(w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixDecision {
    pub lambda: f64,
    pub a_parametric: GatingVector,
    /// `None` when the memory is empty or every similarity is zero.
    pub a_mem: Option<GatingVector>,
    pub a_final: GatingVector,
    pub neighbors: NeighborSet,
}

impl MixDecision {
    pub fn used_memory(&self) -> bool {
        self.a_mem.is_some()
    }
}

/// Full decision from the parametric router `logits` and a memory lookup of
/// `x`. Falls back to `λ = 0` and the parametric gating when the memory has
/// nothing useful.
pub fn route_logits(
    logits: &[f64],
    x: &[f64],
    memory: &LayerMemory,
    k_neighbors: usize,
    active_experts: usize,
    renormalize: bool,
) -> Result<MixDecision> {
    let a = pi(logits, active_experts, renormalize)?;
    if a.len() != memory.num_experts() {
        return Err(Error::mismatch("memory num_experts", a.len(), memory.num_experts()));
    }
    let neighbors = memory.query(x, k_neighbors)?;
    let values: Vec<GatingVector> = neighbors.indices.iter().map(|&i| memory.value(i).clone()).collect();
    match aggregate_neighbors(&neighbors, &values)? {
        Some(a_mem) => {
            let lambda = confidence(&neighbors);
            let a_final = mix(&a, &a_mem, lambda)?;
            Ok(MixDecision {
                lambda,
                a_parametric: a,
                a_mem: Some(a_mem),
                a_final,
                neighbors,
            })
        }
        None => Ok(MixDecision {
            lambda: 0.0,
            a_final: a.clone(),
            a_parametric: a,
            a_mem: None,
            neighbors,
        }),
    }
}

/// [`route_logits`] with the logits computed from the model's router at `layer`.
pub fn route(model: &MoeModel, x: &[f64], layer: usize, memory: &LayerMemory, k_neighbors: usize) -> Result<MixDecision> {
    if memory.layer() != layer {
        return Err(Error::mismatch("memory layer", layer, memory.layer()));
    }
    if memory.dim() != x.len() {
        return Err(Error::mismatch("memory model_dim", x.len(), memory.dim()));
    }
    let c = model.config();
    let logits = model.router_logits(x, layer)?;
    route_logits(&logits, x, memory, k_neighbors, c.active_experts, c.renormalize_topk)
}

/// Retrieval is used iff the example's baseline perplexity exceeds `threshold`.
pub fn selective_gate(example_ppl: f64, threshold: f64) -> bool {
    example_ppl > threshold
}

/// Routing policy that consults a [`MemorySet`] at every MoE layer and
/// position, recording λ and time spent in retrieval.
#[derive(Debug)]
pub struct AdaptiveRouter<'a> {
    memory: &'a MemorySet,
    k_neighbors: usize,
    active_experts: usize,
    renormalize: bool,
    /// λ per routed (layer, position), in call order.
    pub lambdas: Vec<f64>,
    pub retrieval_time: Duration,
}

impl<'a> AdaptiveRouter<'a> {
    pub fn new(model: &MoeModel, memory: &'a MemorySet, k_neighbors: usize) -> Result<Self> {
        memory.check_compatible(model, None)?;
        if k_neighbors == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(Self {
            memory,
            k_neighbors,
            active_experts: model.config().active_experts,
            renormalize: model.config().renormalize_topk,
            lambdas: Vec::new(),
            retrieval_time: Duration::ZERO,
        })
    }
}

impl RoutingPolicy for AdaptiveRouter<'_> {
    fn directive(&mut self, layer: usize, position: usize, x: &[f64], logits: &[f64]) -> Result<Directive> {
        let Some(memory) = self.memory.layer(layer) else {
            return Err(Error::PlanCoverage { layer, position });
        };
        if memory.is_empty() {
            self.lambdas.push(0.0);
            return Ok(Directive::Parametric);
        }
        let start = Instant::now();
        let d = route_logits(logits, x, memory, self.k_neighbors, self.active_experts, self.renormalize)?;
        self.retrieval_time += start.elapsed();
        self.lambdas.push(d.lambda);
        // A zero-confidence decision is exactly the parametric gating; keep the
        // parametric path so fallbacks reproduce the baseline bit for bit.
        if !d.used_memory() || d.lambda == 0.0 {
            return Ok(Directive::Parametric);
        }
        Ok(Directive::Override(d.a_final))
    }
}
