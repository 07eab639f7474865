//! Finite-difference gradient suite run by the `check` command.

use memrouter_autodiff::{finite_diff_check, Graph, NodeId, Result as AdResult, Tensor};
use memrouter_core::builder::strict_gradient_check;
use memrouter_core::{ModelConfig, MoeModel};

/// Step for the routing-logit check.
pub const STEP: f64 = 1e-3;
/// Step for single primitives. Their O(h^2) truncation error at 1e-3 can
/// exceed the tolerance on elements whose gradient is near zero; inputs here
/// are exact `f64` so a smaller step costs no precision.
pub const PRIMITIVE_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error, or the failure message.
    pub outcome: Result<f64, String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        matches!(self.outcome, Ok(e) if e < TOLERANCE)
    }
}

/// Deterministic values in `[-1, 1)` from a low-discrepancy sequence.
fn filled(shape: &[usize], offset: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + offset) * 0.754_877_666_246_692_8).fract() * 2.0 - 1.0).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Weighted sum so every output element reaches the root.
fn contract(g: &mut Graph, y: NodeId) -> AdResult<NodeId> {
    let w = filled(g.value(y).shape(), 0.37);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> AdResult<NodeId>>;

fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    vec![
        (
            "matmul",
            vec![filled(&[3, 4], 0.1), filled(&[4, 2], 0.2)],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                contract(g, y)
            }),
        ),
        (
            "softmax_rows",
            vec![filled(&[3, 5], 0.3)],
            Box::new(|g, x| {
                let y = g.softmax_rows(x[0])?;
                contract(g, y)
            }),
        ),
        (
            "rms_norm",
            vec![filled(&[3, 4], 0.4), filled(&[4], 0.5)],
            Box::new(|g, x| {
                let y = g.rms_norm(x[0], x[1], 1e-5)?;
                contract(g, y)
            }),
        ),
        (
            "silu",
            vec![filled(&[2, 5], 0.6)],
            Box::new(|g, x| {
                let y = g.silu(x[0])?;
                contract(g, y)
            }),
        ),
        (
            "cross_entropy_rows",
            vec![filled(&[3, 6], 0.7)],
            Box::new(|g, x| {
                let y = g.cross_entropy_rows(x[0], &[1, 5, 0])?;
                g.sum(y)
            }),
        ),
        (
            "causal_attention",
            vec![filled(&[4, 6], 0.8), filled(&[4, 6], 0.9), filled(&[4, 6], 1.1)],
            Box::new(|g, x| {
                let y = g.causal_attention(x[0], x[1], x[2], 2)?;
                contract(g, y)
            }),
        ),
        (
            "embedding",
            vec![filled(&[5, 3], 1.2)],
            Box::new(|g, x| {
                let y = g.embedding(x[0], &[4, 0, 4, 2])?;
                contract(g, y)
            }),
        ),
        (
            "expert_dispatch",
            vec![filled(&[4, 3], 1.3), filled(&[4, 2], 1.4)],
            Box::new(|g, x| {
                let rows = g.gather_rows(x[0], &[0, 2, 3])?;
                let w = g.slice_col(x[1], 1)?;
                let w = g.gather_rows(w, &[0, 2, 3])?;
                let scaled = g.mul_col(rows, w)?;
                let back = g.scatter_rows(scaled, &[0, 2, 3], 4)?;
                contract(g, back)
            }),
        ),
    ]
}

/// Tiny model used for the routing-logit gradient check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        model_dim: 8,
        num_layers: 2,
        moe_layers: vec![0, 1],
        num_experts: 4,
        active_experts: 2,
        num_heads: 2,
        context_length: 8,
        expert_hidden_dim: 6,
        renormalize_topk: false,
    }
}

/// Runs every primitive check plus the routing-logit check on a tiny model
/// over a 4-token sequence.
pub fn run_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    for (name, inputs, build) in primitive_cases() {
        let mut worst: Result<f64, String> = Ok(0.0);
        for leaf in 0..inputs.len() {
            match finite_diff_check(&build, &inputs, leaf, PRIMITIVE_STEP) {
                Ok(r) => worst = worst.map(|w| w.max(r.max_relative_error)),
                Err(e) => {
                    worst = Err(e.to_string());
                    break;
                }
            }
        }
        out.push(CheckResult {
            name: format!("autodiff {name}"),
            outcome: worst,
        });
    }
    for seed in 0..3u64 {
        let outcome = MoeModel::init(tiny_config(), seed)
            .and_then(|m| strict_gradient_check(&m, &[1, 7, 3, 9], STEP))
            .map_err(|e| e.to_string());
        out.push(CheckResult {
            name: format!("routing logits, model seed {seed}"),
            outcome,
        });
    }
    out
}
