//! Base-model pretraining: SGD with momentum, cosine learning-rate decay and
//! global-norm gradient clipping.

use memrouter_autodiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{MoeModel, Parametric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            steps: 800,
            batch_size: 16,
            lr: 0.3,
            momentum: 0.9,
            min_lr_ratio: 0.05,
            warmup_steps: 50,
            clip_norm: 1.0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("lr must be positive, momentum in [0,1), min_lr_ratio in [0,1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean per-token training loss at each step.
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Summed next-token NLL of one sequence and its parameter gradients.
fn sequence_grads(model: &MoeModel, tokens: &[usize]) -> Result<(f64, usize, Vec<Tensor>)> {
    let mut g = Graph::new();
    let tr = model.trace(&mut g, &tokens[..tokens.len() - 1], Parametric, true)?;
    let losses = g.cross_entropy_rows(tr.logits, &tokens[1..])?;
    let root = g.sum(losses)?;
    let loss = g.value(root).data()[0];
    let mut grads = g.backward(root)?;
    let grads = tr
        .params
        .iter()
        .map(|&p| grads.take(p).expect("parameter leaf"))
        .collect();
    Ok((loss, tokens.len() - 1, grads))
}

/// Trains a fresh model on `corpus`. Per-sequence gradients run in parallel
/// and are reduced in batch order, so results do not depend on thread count.
pub fn pretrain(
    config: &ModelConfig,
    corpus: &Corpus,
    params: &TrainParams,
    init_seed: u64,
    shuffle_seed: u64,
) -> Result<(MoeModel, TrainLog)> {
    params.validate()?;
    let usable: Vec<&Vec<usize>> = corpus.sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("training corpus has no sequence of length >= 2".into()));
    }
    let mut model = MoeModel::init(config.clone(), init_seed)?;
    let mut velocity: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = Vec::new();
    let mut log = TrainLog::default();
    let max_len = config.context_length + 1;

    for step in 0..params.steps {
        let mut batch = Vec::with_capacity(params.batch_size);
        while batch.len() < params.batch_size {
            if order.is_empty() {
                order = (0..usable.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("non-empty"));
        }
        let results: Vec<Result<(f64, usize, Vec<Tensor>)>> = batch
            .par_iter()
            .map(|&i| {
                let s = usable[i];
                sequence_grads(&model, &s[..s.len().min(max_len)])
            })
            .collect();

        let mut total_loss = 0.0;
        let mut total_targets = 0usize;
        let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        for r in results {
            let (loss, n, gs) = r?;
            total_loss += loss;
            total_targets += n;
            for (acc, gi) in grads.iter_mut().zip(gs) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b;
                }
            }
        }
        let mean_loss = total_loss / total_targets as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { step, loss: mean_loss });
        }
        let inv = 1.0 / total_targets as f64;
        let mut norm_sq = 0.0;
        for gt in &mut grads {
            for v in gt.data_mut() {
                *v *= inv;
                norm_sq += *v * *v;
            }
        }
        let norm = norm_sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: mean_loss });
        }
        let clip = if params.clip_norm > 0.0 && norm > params.clip_norm {
            params.clip_norm / norm
        } else {
            1.0
        };
        let lr = params.lr_at(step);
        for ((p, vel), gt) in model.params_mut().zip(&mut velocity).zip(&grads) {
            for ((w, m), gv) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(gt.data()) {
                *m = params.momentum * *m + gv * clip;
                *w -= lr * *m;
            }
        }
        log.losses.push(mean_loss);
        log.learning_rates.push(lr);
    }
    model.round_to_f32();
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let p = TrainParams {
            steps: 100,
            warmup_steps: 0,
            ..TrainParams::default()
        };
        assert!((p.lr_at(0) - p.lr).abs() < 1e-12);
        assert!((p.lr_at(100) - p.lr * p.min_lr_ratio).abs() < 1e-12);
        assert!(p.lr_at(50) < p.lr && p.lr_at(50) > p.lr * p.min_lr_ratio);
    }

    #[test]
    fn rejects_empty_corpus() {
        let c = Corpus {
            domain_id: 0,
            vocab_size: 64,
            sequences: vec![],
        };
        assert!(pretrain(&ModelConfig::default(), &c, &TrainParams::default(), 0, 0).is_err());
    }
}
