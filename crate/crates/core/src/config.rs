use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy MoE transformer.
///
/// Layer indices in `moe_layers` are zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub moe_layers: Vec<usize>,
    pub num_experts: usize,
    pub active_experts: usize,
    pub num_heads: usize,
    pub context_length: usize,
    pub expert_hidden_dim: usize,
    #[serde(default)]
    pub renormalize_topk: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 64,
            num_layers: 4,
            moe_layers: vec![0, 1, 2, 3],
            num_experts: 8,
            active_experts: 2,
            num_heads: 4,
            context_length: 128,
            expert_hidden_dim: 128,
            renormalize_topk: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_experts", self.num_experts),
            ("num_heads", self.num_heads),
            ("context_length", self.context_length),
            ("expert_hidden_dim", self.expert_hidden_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.active_experts == 0 || self.active_experts > self.num_experts {
            return Err(Error::Config(format!(
                "active_experts must be in 1..={}, got {}",
                self.num_experts, self.active_experts
            )));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_experts > u16::MAX as usize {
            return Err(Error::Config("num_experts must fit in u16".into()));
        }
        if !self.moe_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("moe_layers must be strictly increasing".into()));
        }
        if let Some(&l) = self.moe_layers.iter().find(|&&l| l >= self.num_layers) {
            return Err(Error::Config(format!(
                "moe layer {l} out of range for {} layers",
                self.num_layers
            )));
        }
        Ok(())
    }

    pub fn is_moe(&self, layer: usize) -> bool {
        self.moe_layers.binary_search(&layer).is_ok()
    }

    /// Position of `layer` within `moe_layers`.
    pub fn moe_slot(&self, layer: usize) -> Option<usize> {
        self.moe_layers.binary_search(&layer).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_k_and_heads() {
        let mut c = ModelConfig {
            active_experts: 9,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        c.active_experts = 2;
        c.num_heads = 5;
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.moe_layers = vec![0, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::default()).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
