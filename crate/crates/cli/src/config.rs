//! Run configuration: one JSON document covering every stage.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use memrouter_core::builder::BuildParams;
use memrouter_core::data::DomainSpec;
use memrouter_core::eval::{EvalMode, Seeds, SweepGrid};
use memrouter_core::store::{Kernel, SimilarityConfig};
use memrouter_core::train::TrainParams;
use memrouter_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainParams,
    pub build: BuildParams,
    pub retrieval: RetrievalConfig,
    pub eval: EvalConfig,
    pub sweep: SweepGrid,
    pub seeds: Seeds,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: DomainSpec,
    pub reference: DomainSpec,
    pub test: DomainSpec,
    /// Token budget taken from the reference corpus when building a memory.
    pub ref_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(rename = "K")]
    pub k_neighbors: usize,
    pub kernel: Kernel,
    /// Fixed RBF bandwidth; estimated from the keys when absent.
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<EvalMode>,
    /// Baseline PPL at or below which the selective variant skips retrieval;
    /// defaults to the low-tercile cut of the test set.
    pub selective_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// Domain 2 shares domain 1's tokens but not its transitions.
fn shift_domain(domain_id: u32, seed: u64, num_sequences: usize) -> DomainSpec {
    DomainSpec {
        active_vocab: Some(16),
        vocab_domain: Some(1),
        ..DomainSpec::markov(domain_id, seed, 64, 64, num_sequences)
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: shift_domain(1, 1, 3000),
            reference: shift_domain(2, 3, 100),
            test: shift_domain(2, 4, 30),
            ref_tokens: 1000,
        }
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 1,
            kernel: Kernel::Rbf,
            gamma: None,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: vec![EvalMode::ZeroShot, EvalMode::KnnMoe, EvalMode::KnnMoeSelective],
            selective_threshold: None,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl RunConfig {
    /// Reads `path`, or starts from defaults when `None`, then applies
    /// `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let parsed: RunConfig =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                serde_json::to_value(parsed)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).context("config after overrides")?;
        if let Some(s) = seed {
            cfg.seeds = Seeds {
                data: s,
                init: s,
                shuffle: s,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.build.validate()?;
        self.sweep.validate()?;
        for (name, spec) in [
            ("train", &self.data.train),
            ("reference", &self.data.reference),
            ("test", &self.data.test),
        ] {
            spec.validate().with_context(|| format!("data.{name}"))?;
            if spec.vocab_size != self.model.vocab_size {
                bail!(
                    "data.{name}.vocab_size is {} but model.vocab_size is {}",
                    spec.vocab_size,
                    self.model.vocab_size
                );
            }
            if spec.sequence_length > self.model.context_length {
                bail!(
                    "data.{name}.sequence_length {} exceeds model.context_length {}",
                    spec.sequence_length,
                    self.model.context_length
                );
            }
        }
        if self.retrieval.k_neighbors == 0 {
            bail!("retrieval.K must be positive");
        }
        if let Some(g) = self.retrieval.gamma {
            if !(g > 0.0 && g.is_finite()) {
                bail!("retrieval.gamma must be positive and finite, got {g}");
            }
        }
        if self.eval.modes.is_empty() {
            bail!("eval.modes must name at least one mode");
        }
        Ok(())
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            kernel: self.retrieval.kernel,
            gamma: self.retrieval.gamma,
        }
    }

    /// `spec` with its sampling seed offset by `seeds.data`; a data seed of 0
    /// leaves the configured seeds unchanged.
    pub fn seeded(&self, spec: &DomainSpec) -> DomainSpec {
        DomainSpec {
            seed: spec.seed ^ self.seeds.data.wrapping_mul(0x9e37_79b9_7f4a_7c15),
            ..spec.clone()
        }
    }
}

/// Sets the dotted `path` in `value`. The right-hand side is parsed as JSON,
/// falling back to a plain string, so `retrieval.kernel=cosine` and
/// `eval.modes=["ZERO_SHOT"]` both work.
pub fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form path=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one item");
    let mut node = value;
    for (i, k) in parents.iter().enumerate() {
        node = node
            .get_mut(*k)
            .filter(|v| v.is_object())
            .ok_or_else(|| anyhow!("override {path:?}: no section {:?}", keys[..=i].join(".")))?;
    }
    let map = node.as_object_mut().expect("checked above");
    if !map.contains_key(*last) {
        bail!("override {path:?}: unknown key {last:?}");
    }
    map.insert(last.to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "retrieval.K=3".into(),
                "retrieval.kernel=cosine".into(),
                "data.test.num_sequences=5".into(),
            ],
            Some(7),
        )
        .unwrap();
        assert_eq!(cfg.retrieval.k_neighbors, 3);
        assert_eq!(cfg.retrieval.kernel, Kernel::Cosine);
        assert_eq!(cfg.data.test.num_sequences, 5);
        assert_eq!(cfg.seeds.init, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["retrieval.k=3".into()], None).is_err());
        assert!(RunConfig::load(None, &["nope.x=1".into()], None).is_err());
        assert!(RunConfig::load(None, &["retrieval.K".into()], None).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"retrieval": {"K": 2, "extra": 1}}"#).unwrap();
        assert!(RunConfig::load(Some(&p), &[], None).is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"retrieval": {"K": 4}, "output": {"dir": "x"}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), &[], None).unwrap();
        assert_eq!(cfg.retrieval.k_neighbors, 4);
        assert_eq!(cfg.build, BuildParams::default());
        assert_eq!(cfg.output.dir, PathBuf::from("x"));
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::load(None, &["retrieval.K=0".into()], None).is_err());
        assert!(RunConfig::load(None, &["model.vocab_size=32".into()], None).is_err());
        assert!(RunConfig::load(None, &["build.eta=-1".into()], None).is_err());
        assert!(RunConfig::load(None, &["sweep.steps=[]".into()], None).is_err());
    }

    #[test]
    fn zero_data_seed_keeps_specs() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.seeded(&cfg.data.test), cfg.data.test);
        let mut other = cfg.clone();
        other.seeds.data = 7;
        assert_ne!(other.seeded(&cfg.data.test).seed, cfg.data.test.seed);
    }
}
