//! Central finite-difference verification of tape gradients.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients for one leaf.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// `max |fd - g| / max(|g|, 1e-8)` over all elements of the leaf.
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
}

const REL_FLOOR: f64 = 1e-8;

/// Checks `d root / d inputs[leaf]` from [`Graph::backward`] against central
/// differences with the given step.
///
/// `build` records the function on a fresh graph given one leaf per input and
/// returns the scalar root. It is re-run for every perturbation, so it must be
/// a pure function of the leaf values.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor], leaf: usize, step: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::BadStep(step));
    }
    let eval = |vals: &[Tensor]| -> Result<(Graph, NodeId, Vec<NodeId>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok((g, root, ids))
    };

    let (graph, root, ids) = eval(inputs)?;
    let target = *ids.get(leaf).ok_or(AutodiffError::UnknownNode(leaf))?;
    let grads = graph.backward(root)?;
    let analytic = grads.get(target).cloned().unwrap_or_else(|| Tensor::zeros(inputs[leaf].shape()));

    let mut work = inputs.to_vec();
    let mut report = FdReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
    };
    for i in 0..inputs[leaf].numel() {
        let orig = inputs[leaf].data()[i];
        let mut side = |delta: f64| -> Result<f64> {
            work[leaf].data_mut()[i] = orig + delta;
            let (g, r, _) = eval(&work)?;
            let v = g.value(r).data()[0];
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite { index: i });
            }
            Ok(v)
        };
        let plus = side(step)?;
        let minus = side(-step)?;
        work[leaf].data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let exact = analytic.data()[i];
        let abs = (numeric - exact).abs();
        let rel = abs / exact.abs().max(REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
