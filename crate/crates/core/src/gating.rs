//! Sparse expert-weight vectors and the Top-k softmax router map.

use memrouter_autodiff::softmax_in_place;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the upper bound of a gating vector's total weight.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Length-N nonnegative expert weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GatingVector(Vec<f64>);

impl GatingVector {
    /// Wraps raw weights, checking nonnegativity, finiteness and the sum bound.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let g = Self(weights);
        g.validate()?;
        Ok(g)
    }

    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        Self(w)
    }

    /// Builds a vector of length `n` from `(expert, weight)` pairs.
    pub fn from_sparse(n: usize, pairs: &[(usize, f64)]) -> Result<Self> {
        let mut w = vec![0.0; n];
        for &(i, v) in pairs {
            let slot = w
                .get_mut(i)
                .ok_or_else(|| Error::Invalid(format!("expert index {i} >= {n}")))?;
            *slot = v;
        }
        Self::new(w)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.0.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!("gating weight {v} is negative or non-finite")));
        }
        let s = self.sum();
        if s > 1.0 + SUM_TOLERANCE {
            return Err(Error::Invalid(format!("gating weights sum to {s} > 1")));
        }
        Ok(())
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn nonzeros(&self) -> usize {
        self.0.iter().filter(|&&v| v != 0.0).count()
    }

    /// `(expert, weight)` for every nonzero entry, by ascending expert index.
    pub fn support(&self) -> Vec<(usize, f64)> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &GatingVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Marks the `k` largest entries; ties go to the lower index.
pub fn topk_mask(probs: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mask = vec![false; probs.len()];
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
    mask
}

/// Top-k softmax: softmax over all logits, keep the k largest probabilities,
/// optionally renormalise the survivors to sum to one.
pub fn pi(logits: &[f64], k: usize, renormalize: bool) -> Result<GatingVector> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "router logits".into(),
        });
    }
    if k == 0 || k > logits.len() {
        return Err(Error::Invalid(format!("k = {k} outside 1..={}", logits.len())));
    }
    let mut probs = logits.to_vec();
    softmax_in_place(&mut probs);
    let mask = topk_mask(&probs, k);
    // Same arithmetic as the tape path (multiply by a 0/1 mask, then divide by
    // the full-row sum) so replayed gatings match bit for bit.
    for (p, keep) in probs.iter_mut().zip(&mask) {
        *p *= if *keep { 1.0 } else { 0.0 };
    }
    if renormalize {
        let s: f64 = probs.iter().sum();
        if s != 0.0 {
            probs.iter_mut().for_each(|p| *p /= s);
        }
    }
    Ok(GatingVector(probs))
}

/// `Σ_i gating_i · expert_i(x)`, evaluating only experts with nonzero weight.
pub fn mix_expert_outputs<F>(gating: &GatingVector, dim: usize, mut expert: F) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut h = vec![0.0; dim];
    for (i, w) in gating.support() {
        let y = expert(i)?;
        if y.len() != dim {
            return Err(Error::mismatch(format!("expert {i} output width"), dim, y.len()));
        }
        for (acc, v) in h.iter_mut().zip(&y) {
            *acc += w * v;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pi_uniform_tie_goes_low() {
        let g = pi(&[0.0; 4], 2, false).unwrap();
        assert_eq!(g.weights(), &[0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn pi_hand_softmax() {
        let logits = [4f64.ln(), 2f64.ln(), 0.0, 0.0];
        let g = pi(&logits, 2, false).unwrap();
        assert!(close(g.weights(), &[0.5, 0.25, 0.0, 0.0], 1e-15));
        let g = pi(&logits, 2, true).unwrap();
        assert!(close(g.weights(), &[2.0 / 3.0, 1.0 / 3.0, 0.0, 0.0], 1e-15));
    }

    #[test]
    fn pi_rejects_nan() {
        assert!(pi(&[0.0, f64::NAN], 1, false).is_err());
        assert!(pi(&[0.0, 1.0], 3, false).is_err());
    }

    #[test]
    fn mixing_identity_experts_gives_input() {
        let x = vec![0.3, -1.0, 2.0];
        let g = GatingVector::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let h = mix_expert_outputs(&g, 3, |_| Ok(x.clone())).unwrap();
        assert_eq!(h, x);
    }

    #[test]
    fn mixing_skips_zero_gates() {
        let g = GatingVector::zeros(4);
        let h = mix_expert_outputs(&g, 2, |_| panic!("evaluated a zero-gated expert")).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        let g = GatingVector::one_hot(4, 1);
        let h = mix_expert_outputs(&g, 2, |i| Ok(vec![i as f64, 1.0])).unwrap();
        assert_eq!(h, vec![1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn pi_keeps_exactly_the_k_largest(
            logits in prop::collection::vec(-8.0f64..8.0, 2..12),
            k_frac in 0.0f64..1.0,
        ) {
            let n = logits.len();
            let k = 1 + ((n - 1) as f64 * k_frac) as usize;
            let g = pi(&logits, k, false).unwrap();
            prop_assert_eq!(g.nonzeros(), k);

            // sort-based oracle on the softmax probabilities
            let mut probs = logits.clone();
            softmax_in_place(&mut probs);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let mut expected: Vec<usize> = idx[..k].to_vec();
            expected.sort_unstable();
            let got: Vec<usize> = g.support().into_iter().map(|(i, _)| i).collect();
            prop_assert_eq!(got, expected);
            prop_assert!(g.sum() <= 1.0 + SUM_TOLERANCE);

            let r = pi(&logits, k, true).unwrap();
            prop_assert!((r.sum() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pi_is_shift_invariant(
            logits in prop::collection::vec(-5.0f64..5.0, 4..10),
            shift in -20.0f64..20.0,
        ) {
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let a = pi(&logits, 2, false).unwrap();
            let b = pi(&shifted, 2, false).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }
}
