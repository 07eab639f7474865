//! Synthetic multi-domain corpora.
//!
//! A domain is identified by `domain_id`, which alone fixes its generator
//! tables (active sub-vocabulary, Markov transitions, motifs); `seed` only
//! drives sampling. Two corpora with the same `domain_id` and different seeds
//! are therefore independent samples of one distribution.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Order-2 Markov chain with a sparse per-domain transition table.
    Markov2,
    /// Concatenated per-domain motifs.
    Pattern,
}

fn default_branching() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub kind: GeneratorKind,
    pub seed: u64,
    pub sequence_length: usize,
    pub num_sequences: usize,
    pub vocab_size: usize,
    /// Size of the domain's sub-vocabulary; defaults to the full vocabulary.
    #[serde(default)]
    pub active_vocab: Option<usize>,
    /// Successors per Markov state.
    #[serde(default = "default_branching")]
    pub branching: usize,
    /// Domain whose sub-vocabulary is used; defaults to `domain_id`. Lets two
    /// domains share tokens while keeping their own transitions.
    #[serde(default)]
    pub vocab_domain: Option<u32>,
}

impl DomainSpec {
    pub fn markov(domain_id: u32, seed: u64, vocab_size: usize, sequence_length: usize, num_sequences: usize) -> Self {
        Self {
            domain_id,
            kind: GeneratorKind::Markov2,
            seed,
            sequence_length,
            num_sequences,
            vocab_size,
            active_vocab: None,
            branching: default_branching(),
            vocab_domain: None,
        }
    }

    fn active(&self) -> usize {
        self.active_vocab.unwrap_or(self.vocab_size)
    }

    fn sub_vocabulary(&self) -> Vec<usize> {
        let id = self.vocab_domain.unwrap_or(self.domain_id);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(id as u64, 3));
        let mut vocab: Vec<usize> = (0..self.vocab_size).collect();
        vocab.shuffle(&mut rng);
        vocab.truncate(self.active());
        vocab
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        let active = self.active();
        if active == 0 || active > self.vocab_size {
            return Err(Error::Config(format!(
                "vocab overflow: domain uses {active} tokens but the vocabulary has {}",
                self.vocab_size
            )));
        }
        if self.branching == 0 || self.branching > active {
            return Err(Error::Config(format!(
                "branching {} must be in 1..={active}",
                self.branching
            )));
        }
        if self.sequence_length == 0 && self.num_sequences > 0 {
            return Err(Error::Config("sequence_length must be positive".into()));
        }
        Ok(())
    }
}

/// Token sequences drawn from one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub domain_id: u32,
    pub vocab_size: usize,
    pub sequences: Vec<Vec<usize>>,
}

const TABLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(TABLE_SALT);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct MarkovTable {
    vocab: Vec<usize>,
    branching: usize,
    /// For each (a, b) state over the sub-vocabulary: successors and cumulative weights.
    next: Vec<usize>,
    cdf: Vec<f64>,
}

impl MarkovTable {
    fn new(spec: &DomainSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.domain_id as u64, 1));
        let active = spec.active();
        let vocab = spec.sub_vocabulary();
        let b = spec.branching;
        let mut next = Vec::with_capacity(active * active * b);
        let mut cdf = Vec::with_capacity(active * active * b);
        let local: Vec<usize> = (0..active).collect();
        for _ in 0..active * active {
            next.extend(local.choose_multiple(&mut rng, b).copied());
            // skewed weights so each state has a clear favourite
            let w: Vec<f64> = (0..b).map(|_| rng.random::<f64>().powi(2) + 0.05).collect();
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for wi in w {
                acc += wi / total;
                cdf.push(acc);
            }
        }
        Self {
            vocab,
            branching: b,
            next,
            cdf,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let a = self.vocab.len();
        let mut local: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len.min(2) {
            local.push(rng.random_range(0..a));
        }
        while local.len() < len {
            let n = local.len();
            let state = local[n - 2] * a + local[n - 1];
            let u: f64 = rng.random();
            let row = state * self.branching..(state + 1) * self.branching;
            let pick = self.cdf[row.clone()]
                .iter()
                .position(|&c| u < c)
                .unwrap_or(self.branching - 1);
            local.push(self.next[row.start + pick]);
        }
        local.into_iter().map(|i| self.vocab[i]).collect()
    }
}

struct Motifs {
    motifs: Vec<Vec<usize>>,
}

impl Motifs {
    fn new(spec: &DomainSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.domain_id as u64, 2));
        let active = spec.active();
        let vocab = spec.sub_vocabulary();
        let count = (active / 2).max(2);
        let motifs = (0..count)
            .map(|_| {
                let len = rng.random_range(3..=6);
                (0..len).map(|_| vocab[rng.random_range(0..active)]).collect()
            })
            .collect();
        Self { motifs }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len + 6);
        while out.len() < len {
            out.extend_from_slice(&self.motifs[rng.random_range(0..self.motifs.len())]);
        }
        out.truncate(len);
        out
    }
}

type Sampler = dyn Fn(&mut ChaCha8Rng) -> Vec<usize> + Sync;

/// Deterministic corpus for `spec`; sequences are generated in parallel, each
/// from its own seed-derived stream.
pub fn generate_corpus(spec: &DomainSpec) -> Result<Corpus> {
    spec.validate()?;
    let sampler: Box<Sampler> = match spec.kind {
        GeneratorKind::Markov2 => {
            let table = MarkovTable::new(spec);
            let len = spec.sequence_length;
            Box::new(move |rng| table.sample(rng, len))
        }
        GeneratorKind::Pattern => {
            let motifs = Motifs::new(spec);
            let len = spec.sequence_length;
            Box::new(move |rng| motifs.sample(rng, len))
        }
    };
    let base = mix(spec.seed, spec.domain_id as u64 + 3);
    let sequences = (0..spec.num_sequences)
        .into_par_iter()
        .map(|i| sampler(&mut ChaCha8Rng::seed_from_u64(mix(base, i as u64))))
        .collect();
    Ok(Corpus {
        domain_id: spec.domain_id,
        vocab_size: spec.vocab_size,
        sequences,
    })
}

impl Corpus {
    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Number of positions with a next-token target.
    pub fn target_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len().saturating_sub(1)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// The first `budget` tokens, in sequence order; the last sequence is cut short.
    pub fn take_tokens(&self, budget: usize) -> Corpus {
        let mut left = budget;
        let mut sequences = Vec::new();
        for s in &self.sequences {
            if left == 0 {
                break;
            }
            let n = s.len().min(left);
            sequences.push(s[..n].to_vec());
            left -= n;
        }
        Corpus {
            domain_id: self.domain_id,
            vocab_size: self.vocab_size,
            sequences,
        }
    }

    /// The line-oriented file encoding.
    pub fn to_text(&self) -> String {
        let mut out = format!("#corpus domain_id={} vocab_size={}\n", self.domain_id, self.vocab_size);
        for s in &self.sequences {
            let mut first = true;
            for t in s {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{t}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Corpus> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("#corpus") {
            return Err(bad(format!("bad header {header:?}")));
        }
        let (mut domain_id, mut vocab_size) = (None, None);
        for f in fields {
            match f.split_once('=') {
                Some(("domain_id", v)) => domain_id = v.parse().ok(),
                Some(("vocab_size", v)) => vocab_size = v.parse().ok(),
                _ => return Err(bad(format!("unknown header field {f:?}"))),
            }
        }
        let (domain_id, vocab_size) = domain_id
            .zip(vocab_size)
            .ok_or_else(|| bad("header needs domain_id and vocab_size".into()))?;
        let mut sequences = Vec::new();
        for (n, line) in lines.enumerate() {
            let seq = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab_size) {
                return Err(bad(format!("line {}: token {t} >= vocab_size {vocab_size}", n + 2)));
            }
            sequences.push(seq);
        }
        Ok(Corpus {
            domain_id,
            vocab_size,
            sequences,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Corpus> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_text().as_bytes())[..8])
    }

    /// Empirical bigram distribution as a dense `V×V` row-major vector.
    pub fn bigram_distribution(&self) -> Vec<f64> {
        let v = self.vocab_size;
        let mut counts = vec![0.0; v * v];
        let mut total = 0.0;
        for s in &self.sequences {
            for w in s.windows(2) {
                counts[w[0] * v + w[1]] += 1.0;
                total += 1.0;
            }
        }
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        }
        counts
    }
}

/// Total-variation distance between two discrete distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = DomainSpec::markov(1, 42, 64, 32, 10);
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
        let pat = DomainSpec {
            kind: GeneratorKind::Pattern,
            ..spec
        };
        assert_eq!(generate_corpus(&pat).unwrap(), generate_corpus(&pat).unwrap());
    }

    #[test]
    fn empty_corpus() {
        let c = generate_corpus(&DomainSpec::markov(1, 42, 64, 32, 0)).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.total_tokens(), 0);
    }

    #[test]
    fn domains_differ() {
        let a = generate_corpus(&DomainSpec::markov(1, 5, 64, 128, 40)).unwrap();
        let b = generate_corpus(&DomainSpec::markov(2, 5, 64, 128, 40)).unwrap();
        let tv = total_variation(&a.bigram_distribution(), &b.bigram_distribution());
        assert!(tv > 0.1, "tv = {tv}");
    }

    #[test]
    fn vocab_overflow_rejected() {
        let spec = DomainSpec {
            active_vocab: Some(65),
            ..DomainSpec::markov(1, 0, 64, 8, 1)
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn text_round_trip_and_take() {
        let c = generate_corpus(&DomainSpec::markov(3, 1, 64, 10, 4)).unwrap();
        let back = Corpus::from_text(&c.to_text(), Path::new("c")).unwrap();
        assert_eq!(back, c);
        let t = c.take_tokens(25);
        assert_eq!(t.total_tokens(), 25);
        assert_eq!(t.sequences.len(), 3);
        assert_eq!(t.sequences[2].len(), 5);
        assert!(c.take_tokens(0).is_empty());
    }
}
