//! The frozen toy MoE transformer.
//!
//! Pre-norm decoder: token + learned position embeddings, then per layer
//! `x += Attn(RMSNorm(x))` and `x += FFN(RMSNorm(x))`, where the FFN of every
//! layer in `moe_layers` is a sparse mixture of SiLU MLP experts. The router
//! input of a MoE layer is the normalised hidden state fed to its FFN.

use std::collections::BTreeMap;
use std::sync::Arc;

use memrouter_autodiff::{Graph, NodeId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gating::{mix_expert_outputs, pi, topk_mask, GatingVector};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// What a MoE layer uses at one position.
#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    /// `pi(x · W_r)`.
    Parametric,
    /// A fixed gating vector.
    Override(GatingVector),
    /// `pi(r)` with `r` a differentiable leaf initialised to these logits.
    Learnable(Vec<f64>),
}

/// Chooses a directive for each MoE layer/position as the forward pass reaches it.
///
/// `router_input` is the hidden state entering the layer's router and
/// `logits` its parametric router logits.
pub trait RoutingPolicy {
    fn directive(&mut self, layer: usize, position: usize, router_input: &[f64], logits: &[f64])
        -> Result<Directive>;
}

/// Every MoE layer uses its own router everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parametric;

impl RoutingPolicy for Parametric {
    fn directive(&mut self, _: usize, _: usize, _: &[f64], _: &[f64]) -> Result<Directive> {
        Ok(Directive::Parametric)
    }
}

/// A static directive per (MoE layer, position).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingPlan {
    layers: BTreeMap<usize, Vec<Directive>>,
}

impl RoutingPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn all_parametric(config: &ModelConfig, len: usize) -> Self {
        let layers = config
            .moe_layers
            .iter()
            .map(|&l| (l, vec![Directive::Parametric; len]))
            .collect();
        Self { layers }
    }

    /// Replays recorded gatings (indexed by MoE slot, then position).
    pub fn overrides(config: &ModelConfig, gatings: &[Vec<GatingVector>]) -> Self {
        let layers = config
            .moe_layers
            .iter()
            .zip(gatings)
            .map(|(&l, gs)| (l, gs.iter().cloned().map(Directive::Override).collect()))
            .collect();
        Self { layers }
    }

    pub fn set(&mut self, layer: usize, directives: Vec<Directive>) {
        self.layers.insert(layer, directives);
    }

    pub fn set_at(&mut self, layer: usize, position: usize, directive: Directive) -> Result<()> {
        let slot = self
            .layers
            .get_mut(&layer)
            .and_then(|v| v.get_mut(position))
            .ok_or(Error::PlanCoverage { layer, position })?;
        *slot = directive;
        Ok(())
    }

    pub fn get(&self, layer: usize, position: usize) -> Option<&Directive> {
        self.layers.get(&layer).and_then(|v| v.get(position))
    }
}

impl RoutingPolicy for RoutingPlan {
    fn directive(&mut self, layer: usize, position: usize, _: &[f64], _: &[f64]) -> Result<Directive> {
        self.get(layer, position)
            .cloned()
            .ok_or(Error::PlanCoverage { layer, position })
    }
}

impl<P: RoutingPolicy + ?Sized> RoutingPolicy for &mut P {
    fn directive(&mut self, layer: usize, position: usize, x: &[f64], logits: &[f64]) -> Result<Directive> {
        (**self).directive(layer, position, x, logits)
    }
}

#[derive(Debug, Clone, Copy)]
struct ExpertIdx {
    w1: usize,
    w2: usize,
}

#[derive(Debug, Clone)]
enum FfnIdx {
    Dense(ExpertIdx),
    Moe { router: usize, experts: Vec<ExpertIdx> },
}

#[derive(Debug, Clone)]
struct LayerIdx {
    attn_norm: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ffn_norm: usize,
    ffn: FfnIdx,
}

/// Parameter names and shapes in checkpoint order, plus typed indices into them.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub(crate) entries: Vec<(String, Vec<usize>)>,
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    lm_head: usize,
}

impl Layout {
    pub(crate) fn new(c: &ModelConfig) -> Self {
        let mut entries = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            entries.push((name, shape));
            entries.len() - 1
        };
        let (d, h) = (c.model_dim, c.expert_hidden_dim);
        let tok_emb = add("tok_emb".into(), vec![c.vocab_size, d]);
        let pos_emb = add("pos_emb".into(), vec![c.context_length, d]);
        let mut layers = Vec::new();
        for l in 0..c.num_layers {
            let p = format!("layers.{l}");
            let attn_norm = add(format!("{p}.attn_norm"), vec![d]);
            let wq = add(format!("{p}.attn.wq"), vec![d, d]);
            let wk = add(format!("{p}.attn.wk"), vec![d, d]);
            let wv = add(format!("{p}.attn.wv"), vec![d, d]);
            let wo = add(format!("{p}.attn.wo"), vec![d, d]);
            let ffn_norm = add(format!("{p}.ffn_norm"), vec![d]);
            let ffn = if c.is_moe(l) {
                let router = add(format!("{p}.moe.router"), vec![d, c.num_experts]);
                let experts = (0..c.num_experts)
                    .map(|e| ExpertIdx {
                        w1: add(format!("{p}.moe.experts.{e}.w1"), vec![d, h]),
                        w2: add(format!("{p}.moe.experts.{e}.w2"), vec![h, d]),
                    })
                    .collect();
                FfnIdx::Moe { router, experts }
            } else {
                FfnIdx::Dense(ExpertIdx {
                    w1: add(format!("{p}.ffn.w1"), vec![d, h]),
                    w2: add(format!("{p}.ffn.w2"), vec![h, d]),
                })
            };
            layers.push(LayerIdx {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                ffn,
            });
        }
        let final_norm = add("final_norm".into(), vec![d]);
        let lm_head = add("lm_head".into(), vec![d, c.vocab_size]);
        Self {
            entries,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
        }
    }
}

/// Node ids of one traced forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `T×V` next-token logits.
    pub logits: NodeId,
    /// Per MoE slot, the `T×d` router inputs.
    pub router_inputs: Vec<NodeId>,
    /// Per MoE slot, the `T×N` parametric router logits.
    pub router_logits: Vec<NodeId>,
    /// Per MoE slot, the `T×N` gating actually applied.
    pub gates: Vec<NodeId>,
    /// Per MoE slot, the `T×N` learnable logit leaf if any position was
    /// `Learnable` (rows of other positions are unused zeros).
    pub learnable: Vec<Option<NodeId>>,
    /// Parameter nodes in checkpoint order.
    pub params: Vec<NodeId>,
}

/// Values from a forward pass over one sequence.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Per MoE slot, `T×d`.
    pub router_inputs: Vec<Tensor>,
    /// Per MoE slot, per position.
    pub gatings: Vec<Vec<GatingVector>>,
}

#[derive(Debug, Clone)]
pub struct MoeModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Arc<Tensor>>,
}

impl MoeModel {
    /// Randomly initialised model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim as f64;
        let residual_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let mut params = Vec::with_capacity(layout.entries.len());
        for (name, shape) in &layout.entries {
            let t = if name.ends_with("norm") {
                Tensor::full(shape, 1.0)
            } else {
                let std = if name == "tok_emb" {
                    1.0
                } else if name == "pos_emb" {
                    0.1
                } else if name == "lm_head" {
                    0.02
                } else if name.ends_with("wo") || name.ends_with("w2") {
                    residual_scale / (shape[0] as f64).sqrt()
                } else {
                    1.0 / d.sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| normal.sample(&mut rng)).collect())?
            };
            params.push(Arc::new(t));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Model from parameters in checkpoint order (see [`MoeModel::param_names`]).
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.entries.len() {
            return Err(Error::mismatch("parameter count", layout.entries.len(), params.len()));
        }
        for ((name, shape), t) in layout.entries.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::mismatch(format!("shape of {name}"), format!("{shape:?}"), format!("{:?}", t.shape())));
            }
        }
        Ok(Self {
            config,
            layout,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layout
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.params[i].as_ref())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(Arc::make_mut)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint storage
    /// precision, so an in-memory model equals its reloaded checkpoint.
    pub fn round_to_f32(&mut self) {
        for t in self.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn router_matrix(&self, layer: usize) -> Result<&Tensor> {
        match self.layout.layers.get(layer).map(|l| &l.ffn) {
            Some(FfnIdx::Moe { router, .. }) => Ok(&self.params[*router]),
            _ => Err(Error::Invalid(format!("layer {layer} is not a MoE layer"))),
        }
    }

    /// `x · W_r` for one router input.
    pub fn router_logits(&self, x: &[f64], layer: usize) -> Result<Vec<f64>> {
        let w = self.router_matrix(layer)?;
        let (d, n) = (w.shape()[0], w.shape()[1]);
        if x.len() != d {
            return Err(Error::mismatch("router input dim", d, x.len()));
        }
        let mut out = vec![0.0; n];
        for (xi, row) in x.iter().zip(w.data().chunks_exact(n)) {
            for (o, wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        Ok(out)
    }

    /// `Σ_i gating_i · E_i(x)` for one vector at a MoE layer.
    pub fn moe_layer_forward(&self, x: &[f64], gating: &GatingVector, layer: usize) -> Result<Vec<f64>> {
        let Some(FfnIdx::Moe { experts, .. }) = self.layout.layers.get(layer).map(|l| &l.ffn) else {
            return Err(Error::Invalid(format!("layer {layer} is not a MoE layer")));
        };
        let d = self.config.model_dim;
        if x.len() != d {
            return Err(Error::mismatch("router input dim", d, x.len()));
        }
        if gating.len() != self.config.num_experts {
            return Err(Error::mismatch("gating length", self.config.num_experts, gating.len()));
        }
        mix_expert_outputs(gating, d, |i| {
            let e = experts[i];
            let mut g = Graph::new();
            let xi = g.constant(Tensor::new(vec![1, d], x.to_vec())?);
            let y = self.expert_forward(&mut g, xi, e)?;
            Ok(g.value(y).data().to_vec())
        })
    }

    fn expert_forward(&self, g: &mut Graph, x: NodeId, e: ExpertIdx) -> Result<NodeId> {
        let w1 = g.constant_shared(self.params[e.w1].clone());
        let w2 = g.constant_shared(self.params[e.w2].clone());
        let h = g.matmul(x, w1)?;
        let h = g.silu(h)?;
        Ok(g.matmul(h, w2)?)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.context_length {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: self.config.context_length,
            });
        }
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t >= self.config.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                position,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass over `tokens` on `g`.
    ///
    /// With `trainable`, parameters become differentiable leaves; otherwise
    /// they are shared constants.
    pub fn trace(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        mut policy: impl RoutingPolicy,
        trainable: bool,
    ) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let t_len = tokens.len();
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf_shared(p.clone())
                } else {
                    g.constant_shared(p.clone())
                }
            })
            .collect();
        let lay = &self.layout;

        let positions: Vec<usize> = (0..t_len).collect();
        let tok = g.embedding(params[lay.tok_emb], tokens)?;
        let pos = g.embedding(params[lay.pos_emb], &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut trace = Trace {
            logits: x,
            router_inputs: Vec::new(),
            router_logits: Vec::new(),
            gates: Vec::new(),
            learnable: Vec::new(),
            params: Vec::new(),
        };

        for (l, li) in lay.layers.iter().enumerate() {
            let h = g.rms_norm(x, params[li.attn_norm], NORM_EPS)?;
            let q = g.matmul(h, params[li.wq])?;
            let k = g.matmul(h, params[li.wk])?;
            let v = g.matmul(h, params[li.wv])?;
            let a = g.causal_attention(q, k, v, c.num_heads)?;
            let o = g.matmul(a, params[li.wo])?;
            x = g.add(x, o)?;

            let u = g.rms_norm(x, params[li.ffn_norm], NORM_EPS)?;
            let out = match &li.ffn {
                FfnIdx::Dense(e) => self.traced_expert(g, u, *e, &params)?,
                FfnIdx::Moe { router, experts } => {
                    let logits = g.matmul(u, params[*router])?;
                    let (gates, leaf) = self.build_gates(g, l, u, logits, &mut policy)?;
                    trace.router_inputs.push(u);
                    trace.router_logits.push(logits);
                    trace.gates.push(gates);
                    trace.learnable.push(leaf);
                    self.traced_moe(g, u, gates, experts, &params)?
                }
            };
            x = g.add(x, out)?;
        }
        let f = g.rms_norm(x, params[lay.final_norm], NORM_EPS)?;
        trace.logits = g.matmul(f, params[lay.lm_head])?;
        trace.params = params;
        Ok(trace)
    }

    fn traced_expert(&self, g: &mut Graph, x: NodeId, e: ExpertIdx, params: &[NodeId]) -> Result<NodeId> {
        let h = g.matmul(x, params[e.w1])?;
        let h = g.silu(h)?;
        Ok(g.matmul(h, params[e.w2])?)
    }

    fn traced_moe(
        &self,
        g: &mut Graph,
        u: NodeId,
        gates: NodeId,
        experts: &[ExpertIdx],
        params: &[NodeId],
    ) -> Result<NodeId> {
        let t_len = g.value(u).rows();
        let mut total: Option<NodeId> = None;
        for (i, e) in experts.iter().enumerate() {
            let gv = g.value(gates);
            let rows: Vec<usize> = (0..t_len).filter(|&t| gv.row(t)[i] != 0.0).collect();
            if rows.is_empty() {
                continue;
            }
            let xi = g.gather_rows(u, &rows)?;
            let y = self.traced_expert(g, xi, *e, params)?;
            let col = g.slice_col(gates, i)?;
            let w = g.gather_rows(col, &rows)?;
            let y = g.mul_col(y, w)?;
            let y = g.scatter_rows(y, &rows, t_len)?;
            total = Some(match total {
                Some(acc) => g.add(acc, y)?,
                None => y,
            });
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(g.constant(Tensor::zeros(&[t_len, self.config.model_dim]))),
        }
    }

    fn build_gates(
        &self,
        g: &mut Graph,
        layer: usize,
        u: NodeId,
        logits: NodeId,
        policy: &mut impl RoutingPolicy,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let c = &self.config;
        let (t_len, n) = (g.value(logits).rows(), c.num_experts);
        let mut directives = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let d = policy.directive(layer, t, g.value(u).row(t), g.value(logits).row(t))?;
            match &d {
                Directive::Override(gv) => {
                    if gv.len() != n {
                        return Err(Error::mismatch("override gating length", n, gv.len()));
                    }
                    gv.validate()?;
                }
                Directive::Learnable(r) => {
                    if r.len() != n {
                        return Err(Error::mismatch("learnable logits length", n, r.len()));
                    }
                    if r.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            what: format!("learnable logits at layer {layer}, position {t}"),
                        });
                    }
                }
                Directive::Parametric => {
                    if g.value(logits).row(t).iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite {
                            what: format!("router logits at layer {layer}, position {t}"),
                        });
                    }
                }
            }
            directives.push(d);
        }

        let is_learnable: Vec<bool> = directives.iter().map(|d| matches!(d, Directive::Learnable(_))).collect();
        let is_override: Vec<bool> = directives.iter().map(|d| matches!(d, Directive::Override(_))).collect();

        let override_node = if is_override.iter().any(|&o| o) {
            let mut ov = Tensor::zeros(&[t_len, n]);
            for (t, d) in directives.iter().enumerate() {
                if let Directive::Override(gv) = d {
                    ov.row_mut(t).copy_from_slice(gv.weights());
                }
            }
            Some(g.constant(ov))
        } else {
            None
        };
        if is_override.iter().all(|&o| o) {
            return Ok((override_node.expect("all rows overridden"), None));
        }

        let mut leaf = None;
        let source = if is_learnable.iter().any(|&l| l) {
            let mut r = Tensor::zeros(&[t_len, n]);
            for (t, d) in directives.iter().enumerate() {
                if let Directive::Learnable(v) = d {
                    r.row_mut(t).copy_from_slice(v);
                }
            }
            let id = g.leaf(r);
            leaf = Some(id);
            g.row_merge(logits, id, &is_learnable)?
        } else {
            logits
        };
        let probs = g.softmax_rows(source)?;
        let mut mask = Tensor::zeros(&[t_len, n]);
        for (t, &fixed) in is_override.iter().enumerate() {
            if fixed {
                continue;
            }
            let keep = topk_mask(g.value(probs).row(t), c.active_experts);
            for (m, k) in mask.row_mut(t).iter_mut().zip(keep) {
                *m = if k { 1.0 } else { 0.0 };
            }
        }
        let mask = g.constant(mask);
        let mut gates = g.mul(probs, mask)?;
        if c.renormalize_topk {
            gates = g.normalize_rows(gates)?;
        }
        if let Some(ov) = override_node {
            gates = g.row_merge(gates, ov, &is_override)?;
        }
        Ok((gates, leaf))
    }

    /// Forward pass returning values only.
    pub fn forward(&self, tokens: &[usize], policy: impl RoutingPolicy) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, tokens, policy, false)?;
        Ok(self.collect_output(&g, &tr))
    }

    pub fn collect_output(&self, g: &Graph, tr: &Trace) -> ForwardOutput {
        let gatings = tr
            .gates
            .iter()
            .map(|&id| {
                let v = g.value(id);
                (0..v.rows()).map(|t| GatingVector::from_raw(v.row(t).to_vec())).collect()
            })
            .collect();
        ForwardOutput {
            logits: g.value(tr.logits).clone(),
            router_inputs: tr.router_inputs.iter().map(|&id| g.value(id).clone()).collect(),
            gatings,
        }
    }

    /// Parametric gating for one router input (the plain, graph-free path).
    pub fn parametric_gating(&self, x: &[f64], layer: usize) -> Result<GatingVector> {
        let logits = self.router_logits(x, layer)?;
        pi(&logits, self.config.active_experts, self.config.renormalize_topk)
    }
}

/// Per-position `-log p(tokens[t+1] | tokens[..=t])` from `T×V` logits.
pub fn token_nlls(logits: &Tensor, tokens: &[usize]) -> Vec<f64> {
    (0..tokens.len().saturating_sub(1))
        .map(|t| {
            let row = logits.row(t);
            memrouter_autodiff::log_sum_exp(row) - row[tokens[t + 1]]
        })
        .collect()
}

/// Whether the argmax of each prediction row hits the next token (lowest index wins ties).
pub fn token_hits(logits: &Tensor, tokens: &[usize]) -> Vec<bool> {
    (0..tokens.len().saturating_sub(1))
        .map(|t| {
            let row = logits.row(t);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == tokens[t + 1]
        })
        .collect()
}
