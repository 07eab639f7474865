#![allow(dead_code)]

use memrouter_autodiff::Tensor;
use memrouter_core::{ModelConfig, MoeModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        model_dim: 8,
        num_layers: 2,
        moe_layers: vec![0, 1],
        num_experts: 4,
        active_experts: 2,
        num_heads: 2,
        context_length: 16,
        expert_hidden_dim: 6,
        renormalize_topk: false,
    }
}

pub fn tiny_model(seed: u64) -> MoeModel {
    let mut m = MoeModel::init(tiny_config(), seed).unwrap();
    m.round_to_f32();
    m
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Copy of `model` with one parameter replaced.
pub fn with_param(model: &MoeModel, name: &str, value: Tensor) -> MoeModel {
    let params = model
        .param_names()
        .zip(model.params())
        .map(|(n, p)| if n == name { value.clone() } else { p.as_ref().clone() })
        .collect();
    MoeModel::from_parts(model.config().clone(), params).unwrap()
}
