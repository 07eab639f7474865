//! Offline memory construction.
//!
//! For each reference sequence the frozen model is run under teacher forcing.
//! At every position with a target, the router inputs of all MoE layers become
//! keys, and the routing logits of all MoE layers at that position are moved
//! by `S` gradient steps on that token's NLL. The stored value is the Top-k
//! softmax of the optimised logits.

use std::time::Instant;

use memrouter_autodiff::{Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::fingerprint;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::gating::{pi, GatingVector};
use crate::model::{Directive, MoeModel, Parametric, RoutingPlan, RoutingPolicy};
use crate::store::{LayerMemory, MemorySet, SimilarityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    /// One backward per target position using only `∂L_t/∂r_t`.
    Strict,
    /// One backward of the summed sequence loss; later tokens' losses leak into
    /// earlier positions' gradients through causal attention.
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildParams {
    pub eta: f64,
    pub steps: usize,
    pub mode: BuildMode,
    #[serde(default)]
    pub accept_only_improving: bool,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            eta: 2e-2,
            steps: 1,
            mode: BuildMode::Strict,
            accept_only_improving: false,
        }
    }
}

impl BuildParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Per-position router inputs of one sequence: `keys[slot]` is `T×d`.
pub type SequenceKeys = Vec<Tensor>;

/// Router inputs for every sequence under fully parametric routing.
pub fn collect_keys(model: &MoeModel, corpus: &Corpus) -> Result<Vec<SequenceKeys>> {
    corpus
        .sequences
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|s| Ok(model.forward(s, Parametric)?.router_inputs))
        .collect()
}

/// Routing logits of one sequence, indexed `[position][slot]`, for the
/// positions that have a target (`0..T-1`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogits {
    pub initial: Vec<Vec<Vec<f64>>>,
    pub optimized: Vec<Vec<Vec<f64>>>,
    /// Positions whose loss or gradient went non-finite; their logits are
    /// left at the initial values.
    pub skipped: Vec<bool>,
    /// Per-position NLL under parametric routing.
    pub nll_before: Vec<f64>,
    /// Router inputs `[slot]` (`T×d`) from the parametric pass.
    pub keys: SequenceKeys,
}

fn learnable_plan(model: &MoeModel, logits: &[Vec<Vec<f64>>], len: usize) -> Result<RoutingPlan> {
    let mut plan = RoutingPlan::all_parametric(model.config(), len);
    for (t, row) in logits.iter().enumerate() {
        for (slot, &layer) in model.config().moe_layers.iter().enumerate() {
            plan.set_at(layer, t, Directive::Learnable(row[slot].clone()))?;
        }
    }
    Ok(plan)
}

/// Learnable at every position with the parametric logits as initial values.
struct LearnParametric;

impl RoutingPolicy for LearnParametric {
    fn directive(&mut self, _: usize, _: usize, _: &[f64], logits: &[f64]) -> Result<Directive> {
        Ok(Directive::Learnable(logits.to_vec()))
    }
}

/// `∂L_t/∂r_t` for every target position at parametric routing, one backward
/// per position. Returns the initial logits, gradients (`[t][slot]`),
/// per-position NLLs and keys.
#[allow(clippy::type_complexity)]
pub fn strict_logit_gradients(
    model: &MoeModel,
    tokens: &[usize],
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Option<Vec<Vec<f64>>>>, Vec<f64>, SequenceKeys)> {
    if tokens.len() < 2 {
        return Err(Error::Invalid("need at least two tokens for a target".into()));
    }
    let targets = tokens.len() - 1;
    let mut g = Graph::new();
    let tr = model.trace(&mut g, tokens, LearnParametric, false)?;
    let rows: Vec<usize> = (0..targets).collect();
    let pred = g.gather_rows(tr.logits, &rows)?;
    let ce = g.cross_entropy_rows(pred, &tokens[1..])?;
    let nll: Vec<f64> = g.value(ce).data().to_vec();
    let leaves: Vec<_> = tr.learnable.iter().map(|l| l.expect("all positions learnable")).collect();
    let initial: Vec<Vec<Vec<f64>>> = (0..targets)
        .map(|t| leaves.iter().map(|&l| g.value(l).row(t).to_vec()).collect())
        .collect();
    let keys = tr.router_inputs.iter().map(|&id| g.value(id).clone()).collect();

    let mut grads = Vec::with_capacity(targets);
    for (t, &loss) in nll.iter().enumerate() {
        let root = g.pick(ce, t)?;
        let gr = g.backward(root)?;
        let per_slot: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&l| gr.get(l).expect("leaf gradient").row(t).to_vec())
            .collect();
        let finite = loss.is_finite() && per_slot.iter().flatten().all(|v| v.is_finite());
        grads.push(finite.then_some(per_slot));
    }
    Ok((initial, grads, nll, keys))
}

/// `L_t` and `∂L_t/∂r_t` with position `t` routed by learnable logits `r`
/// (per slot) and all other positions parametric.
fn token_loss_and_grad(model: &MoeModel, tokens: &[usize], t: usize, r: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let prefix = &tokens[..=t];
    let mut plan = RoutingPlan::all_parametric(model.config(), prefix.len());
    for (slot, &layer) in model.config().moe_layers.iter().enumerate() {
        plan.set_at(layer, t, Directive::Learnable(r[slot].clone()))?;
    }
    let mut g = Graph::new();
    let tr = model.trace(&mut g, prefix, plan, false)?;
    let last = g.gather_rows(tr.logits, &[t])?;
    let ce = g.cross_entropy_rows(last, &[tokens[t + 1]])?;
    let root = g.pick(ce, 0)?;
    let loss = g.value(root).data()[0];
    let gr = g.backward(root)?;
    let grads = tr
        .learnable
        .iter()
        .map(|l| gr.get(l.expect("learnable slot")).expect("leaf").row(t).to_vec())
        .collect();
    Ok((loss, grads))
}

fn step(r: &mut [Vec<f64>], grad: &[Vec<f64>], eta: f64) {
    for (rs, gs) in r.iter_mut().zip(grad) {
        for (v, g) in rs.iter_mut().zip(gs) {
            *v -= eta * g;
        }
    }
}

/// Runs `params.steps` gradient steps on the routing logits of every target
/// position of `tokens`.
pub fn optimize_token_logits(model: &MoeModel, tokens: &[usize], params: &BuildParams) -> Result<TokenLogits> {
    params.validate()?;
    match params.mode {
        BuildMode::Strict => optimize_strict(model, tokens, params),
        BuildMode::Fast => optimize_fast(model, tokens, params),
    }
}

fn optimize_strict(model: &MoeModel, tokens: &[usize], params: &BuildParams) -> Result<TokenLogits> {
    let (initial, grads0, nll_before, keys) = strict_logit_gradients(model, tokens)?;
    let mut optimized = initial.clone();
    let mut skipped = vec![false; initial.len()];
    if params.steps == 0 {
        return Ok(TokenLogits {
            initial,
            optimized,
            skipped,
            nll_before,
            keys,
        });
    }
    for (t, g0) in grads0.iter().enumerate() {
        let Some(g0) = g0 else {
            skipped[t] = true;
            continue;
        };
        let mut r = initial[t].clone();
        step(&mut r, g0, params.eta);
        for _ in 1..params.steps {
            let (loss, g) = token_loss_and_grad(model, tokens, t, &r)?;
            if !loss.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
                skipped[t] = true;
                break;
            }
            step(&mut r, &g, params.eta);
        }
        if r.iter().flatten().any(|v| !v.is_finite()) {
            skipped[t] = true;
        }
        if !skipped[t] {
            optimized[t] = r;
        }
    }
    Ok(TokenLogits {
        initial,
        optimized,
        skipped,
        nll_before,
        keys,
    })
}

fn optimize_fast(model: &MoeModel, tokens: &[usize], params: &BuildParams) -> Result<TokenLogits> {
    if tokens.len() < 2 {
        return Err(Error::Invalid("need at least two tokens for a target".into()));
    }
    let targets = tokens.len() - 1;
    let mut initial = Vec::new();
    let mut current: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut nll_before = Vec::new();
    let mut keys = Vec::new();
    let mut skipped = vec![false; targets];
    for s in 0..params.steps.max(1) {
        let mut g = Graph::new();
        let tr = match &current {
            None => model.trace(&mut g, tokens, LearnParametric, false)?,
            // the last position has no target and stays parametric
            Some(r) => model.trace(&mut g, tokens, learnable_plan(model, r, tokens.len())?, false)?,
        };
        let rows: Vec<usize> = (0..targets).collect();
        let pred = g.gather_rows(tr.logits, &rows)?;
        let ce = g.cross_entropy_rows(pred, &tokens[1..])?;
        let leaves: Vec<_> = tr.learnable.iter().map(|l| l.expect("learnable")).collect();
        let r: Vec<Vec<Vec<f64>>> = (0..targets)
            .map(|t| leaves.iter().map(|&l| g.value(l).row(t).to_vec()).collect())
            .collect();
        if s == 0 {
            nll_before = g.value(ce).data().to_vec();
            keys = tr.router_inputs.iter().map(|&id| g.value(id).clone()).collect();
            initial = r.clone();
            if params.steps == 0 {
                current = Some(r);
                break;
            }
        }
        let root = g.sum(ce)?;
        let gr = g.backward(root)?;
        let mut next = r;
        for (t, rt) in next.iter_mut().enumerate() {
            if skipped[t] {
                continue;
            }
            let gt: Vec<Vec<f64>> = leaves.iter().map(|&l| gr.get(l).expect("leaf").row(t).to_vec()).collect();
            if gt.iter().flatten().any(|v| !v.is_finite()) {
                skipped[t] = true;
                continue;
            }
            step(rt, &gt, params.eta);
        }
        current = Some(next);
    }
    let mut optimized = current.expect("at least one pass");
    for (t, skip) in skipped.iter().enumerate() {
        if *skip {
            optimized[t] = initial[t].clone();
        }
    }
    Ok(TokenLogits {
        initial,
        optimized,
        skipped,
        nll_before,
        keys,
    })
}

/// Largest relative error between the STRICT gradients `∂L_t/∂r_t` and
/// central differences of `L_t`, over every target position, MoE layer and
/// expert. Relative errors use the denominator `max(|g|, 1e-8)`.
pub fn strict_gradient_check(model: &MoeModel, tokens: &[usize], step: f64) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let (initial, grads, _, _) = strict_logit_gradients(model, tokens)?;
    let loss_at = |t: usize, logits: &[Vec<Vec<f64>>]| -> Result<f64> {
        let out = model.forward(tokens, learnable_plan(model, logits, tokens.len())?)?;
        let l = crate::model::token_nlls(&out.logits, tokens)[t];
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::NonFinite {
                what: format!("loss at position {t} during perturbation"),
            })
        }
    };
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        let g = g.as_ref().ok_or_else(|| Error::NonFinite {
            what: format!("gradient at position {t}"),
        })?;
        for slot in 0..g.len() {
            for i in 0..g[slot].len() {
                let mut r = initial.clone();
                r[t][slot][i] += step;
                let plus = loss_at(t, &r)?;
                r[t][slot][i] -= 2.0 * step;
                let minus = loss_at(t, &r)?;
                let fd = (plus - minus) / (2.0 * step);
                worst = worst.max((fd - g[slot][i]).abs() / g[slot][i].abs().max(1e-8));
            }
        }
    }
    Ok(worst)
}

/// NLL of `tokens[t+1]` when position `t` uses `gating[slot]` at every MoE
/// layer and all other positions are parametric.
pub fn token_nll_with_override(model: &MoeModel, tokens: &[usize], t: usize, gating: &[GatingVector]) -> Result<f64> {
    let prefix = &tokens[..=t];
    let mut plan = RoutingPlan::all_parametric(model.config(), prefix.len());
    for (slot, &layer) in model.config().moe_layers.iter().enumerate() {
        plan.set_at(layer, t, Directive::Override(gating[slot].clone()))?;
    }
    let out = model.forward(prefix, plan)?;
    let row = out.logits.row(t);
    Ok(memrouter_autodiff::log_sum_exp(row) - row[tokens[t + 1]])
}

/// Summary of one memory construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub mode: BuildMode,
    pub eta: f64,
    pub steps: usize,
    pub accept_only_improving: bool,
    /// True for FAST mode, whose gradients are not the per-token ones.
    pub approximate: bool,
    pub sequences: usize,
    pub target_tokens: usize,
    pub entries_per_layer: usize,
    pub skipped: usize,
    pub rejected: usize,
    /// Mean NLL with parametric routing.
    pub mean_nll_before: f64,
    /// Mean of each token's NLL with only its own position overridden.
    pub mean_nll_after: f64,
    /// Mean NLL with every position overridden at once.
    pub mean_nll_after_joint: f64,
    pub fraction_improved: f64,
    pub warnings: Vec<String>,
}

/// Wall-clock timing of a build, kept apart from the deterministic report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildTiming {
    pub total_seconds: f64,
}

struct SequenceResult {
    keys: SequenceKeys,
    values: Vec<Option<Vec<GatingVector>>>,
    nll_before: Vec<f64>,
    nll_after: Vec<f64>,
    nll_after_joint: Vec<f64>,
    skipped: usize,
    rejected: usize,
}

fn build_sequence(model: &MoeModel, tokens: &[usize], params: &BuildParams) -> Result<SequenceResult> {
    let cfg = model.config();
    let (k, renorm) = (cfg.active_experts, cfg.renormalize_topk);
    let opt = optimize_token_logits(model, tokens, params)?;
    let targets = tokens.len() - 1;
    let mut values = Vec::with_capacity(targets);
    let mut nll_after = Vec::with_capacity(targets);
    let mut rejected = 0;
    for t in 0..targets {
        if opt.skipped[t] {
            values.push(None);
            nll_after.push(opt.nll_before[t]);
            continue;
        }
        let v: Vec<GatingVector> = opt.optimized[t]
            .iter()
            .map(|r| pi(r, k, renorm))
            .collect::<Result<_>>()?;
        let after = token_nll_with_override(model, tokens, t, &v)?;
        if params.accept_only_improving && after > opt.nll_before[t] {
            let base: Vec<GatingVector> = opt.initial[t]
                .iter()
                .map(|r| pi(r, k, renorm))
                .collect::<Result<_>>()?;
            let base_nll = token_nll_with_override(model, tokens, t, &base)?;
            rejected += 1;
            nll_after.push(base_nll);
            values.push(Some(base));
        } else {
            nll_after.push(after);
            values.push(Some(v));
        }
    }

    // every position overridden at once
    let mut plan = RoutingPlan::all_parametric(cfg, tokens.len());
    for (t, v) in values.iter().enumerate() {
        if let Some(v) = v {
            for (slot, &layer) in cfg.moe_layers.iter().enumerate() {
                plan.set_at(layer, t, Directive::Override(v[slot].clone()))?;
            }
        }
    }
    let joint = model.forward(tokens, plan)?;
    let nll_after_joint = crate::model::token_nlls(&joint.logits, tokens);

    Ok(SequenceResult {
        keys: opt.keys,
        skipped: opt.skipped.iter().filter(|&&s| s).count(),
        values,
        nll_before: opt.nll_before,
        nll_after,
        nll_after_joint,
        rejected,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Builds one [`LayerMemory`] per MoE layer from `corpus`.
///
/// Sequences are processed independently (in parallel) and merged in
/// (sequence, position) order.
pub fn build_memory(
    model: &MoeModel,
    corpus: &Corpus,
    params: &BuildParams,
    similarity: SimilarityConfig,
) -> Result<(MemorySet, BuildReport, BuildTiming)> {
    params.validate()?;
    let start = Instant::now();
    let cfg = model.config();
    let usable: Vec<&Vec<usize>> = corpus.sequences.iter().filter(|s| s.len() >= 2).collect();
    let results: Vec<SequenceResult> = usable
        .par_iter()
        .map(|s| build_sequence(model, s, params))
        .collect::<Result<_>>()?;

    let d = cfg.model_dim;
    let mut layers: Vec<(Vec<f64>, Vec<GatingVector>)> = vec![(Vec::new(), Vec::new()); cfg.moe_layers.len()];
    let (mut before, mut after, mut joint) = (Vec::new(), Vec::new(), Vec::new());
    let (mut skipped, mut rejected, mut improved) = (0, 0, 0usize);
    for r in &results {
        for (t, v) in r.values.iter().enumerate() {
            let Some(v) = v else { continue };
            for (slot, (keys, vals)) in layers.iter_mut().enumerate() {
                keys.extend_from_slice(r.keys[slot].row(t));
                vals.push(v[slot].clone());
            }
        }
        before.extend_from_slice(&r.nll_before);
        after.extend_from_slice(&r.nll_after);
        joint.extend_from_slice(&r.nll_after_joint);
        improved += r.nll_after.iter().zip(&r.nll_before).filter(|(a, b)| a < b).count();
        skipped += r.skipped;
        rejected += r.rejected;
    }
    let target_tokens = before.len();
    let mut warnings = Vec::new();
    if target_tokens > 0 && skipped * 10 > target_tokens {
        warnings.push(format!("{skipped} of {target_tokens} tokens skipped for non-finite gradients"));
    }
    if params.mode == BuildMode::Fast {
        warnings.push("FAST mode: gradients include later-token losses".into());
    }

    let memories = cfg
        .moe_layers
        .iter()
        .zip(layers)
        .map(|(&layer, (keys, values))| LayerMemory::new(layer, d, cfg.num_experts, keys, values, similarity))
        .collect::<Result<Vec<_>>>()?;
    let entries_per_layer = memories.first().map_or(0, LayerMemory::len);
    let set = MemorySet {
        fingerprint: fingerprint(model)?,
        model_dim: d,
        num_experts: cfg.num_experts,
        active_experts: cfg.active_experts,
        layers: memories,
    };
    let report = BuildReport {
        mode: params.mode,
        eta: params.eta,
        steps: params.steps,
        accept_only_improving: params.accept_only_improving,
        approximate: params.mode == BuildMode::Fast,
        sequences: usable.len(),
        target_tokens,
        entries_per_layer,
        skipped,
        rejected,
        mean_nll_before: mean(&before),
        mean_nll_after: mean(&after),
        mean_nll_after_joint: mean(&joint),
        fraction_improved: if target_tokens == 0 {
            0.0
        } else {
            improved as f64 / target_tokens as f64
        },
        warnings,
    };
    let timing = BuildTiming {
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((set, report, timing))
}
