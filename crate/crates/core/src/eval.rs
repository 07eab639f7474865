//! Teacher-forced evaluation, perplexity-tercile analysis, ablation sweeps and
//! report output.
//!
//! Reports hold only deterministic quantities; wall-clock measurements are
//! returned separately so two identical runs produce identical report files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builder::{build_memory, BuildMode, BuildParams};
use crate::checkpoint::fingerprint;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{token_hits, token_nlls, MoeModel, Parametric};
use crate::router::{selective_gate, AdaptiveRouter};
use crate::store::{Kernel, MemorySet, SimilarityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalMode {
    ZeroShot,
    KnnMoe,
    KnnMoeSelective,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "ZERO_SHOT" => Ok(EvalMode::ZeroShot),
            "KNN_MOE" => Ok(EvalMode::KnnMoe),
            "KNN_MOE_SELECTIVE" => Ok(EvalMode::KnnMoeSelective),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (ZERO_SHOT | KNN_MOE | KNN_MOE_SELECTIVE)"
            ))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::ZeroShot => "ZERO_SHOT",
            EvalMode::KnnMoe => "KNN_MOE",
            EvalMode::KnnMoeSelective => "KNN_MOE_SELECTIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// Neighbours per query (K).
    pub k_neighbors: usize,
    /// Selective cut on baseline PPL; `None` uses the low-tercile cut of the
    /// evaluated corpus.
    pub selective_threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::ZeroShot,
            k_neighbors: 1,
            selective_threshold: None,
        }
    }
}

/// Labels describing how a report was produced. Only `mode`, `k_neighbors`,
/// `fingerprint` and `selective_threshold` are filled by [`evaluate`]; the
/// rest is set by callers that know them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub mode: Option<EvalMode>,
    pub k_neighbors: usize,
    pub fingerprint: String,
    pub selective_threshold: Option<f64>,
    pub build_steps: Option<usize>,
    pub ref_tokens: Option<usize>,
    pub kernel: Option<Kernel>,
    pub seeds: Option<Seeds>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub index: usize,
    pub targets: usize,
    /// Mean per-token NLL.
    pub nll: f64,
    pub ppl: f64,
    pub accuracy: f64,
    pub mean_lambda: f64,
    pub retrieval_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TercileRow {
    pub bucket: String,
    pub examples: usize,
    pub mean_nll: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub examples: usize,
    pub targets: usize,
    /// Token-weighted mean NLL.
    pub mean_nll: f64,
    /// `exp(mean_nll)`.
    pub perplexity: f64,
    /// Token-weighted next-token accuracy.
    pub accuracy: f64,
    pub mean_lambda: f64,
    pub retrieval_fraction: f64,
    /// Breakdown over this report's own per-example PPL terciles.
    pub terciles: Vec<TercileRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub examples: Vec<ExampleRow>,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleTiming {
    pub retrieval_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub examples: Vec<ExampleTiming>,
    pub total_seconds: f64,
}

impl EvalTiming {
    pub fn mean_example_seconds(&self) -> f64 {
        mean(self.examples.iter().map(|e| e.total_seconds))
    }

    pub fn mean_retrieval_seconds(&self) -> f64 {
        mean(self.examples.iter().map(|e| e.retrieval_seconds))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Tercile cuts `(c1, c2)` over `values`: an item is low if `≤ c1`, middle if
/// `≤ c2`, else high, so ties fall into the lower bucket.
pub fn tercile_cuts(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (sorted[n.div_ceil(3) - 1], sorted[(2 * n).div_ceil(3) - 1])
}

/// Bucket 0 (low), 1 (mid) or 2 (high) of `value` under `cuts`.
pub fn tercile_of(value: f64, cuts: (f64, f64)) -> usize {
    if value <= cuts.0 {
        0
    } else if value <= cuts.1 {
        1
    } else {
        2
    }
}

const BUCKETS: [&str; 3] = ["low", "mid", "high"];

fn aggregate(examples: &[ExampleRow]) -> Aggregate {
    let targets: usize = examples.iter().map(|e| e.targets).sum();
    let weighted = |f: fn(&ExampleRow) -> f64| {
        if targets == 0 {
            0.0
        } else {
            examples.iter().map(|e| f(e) * e.targets as f64).sum::<f64>() / targets as f64
        }
    };
    let mean_nll = weighted(|e| e.nll);
    let cuts = tercile_cuts(&examples.iter().map(|e| e.ppl).collect::<Vec<_>>());
    let terciles = BUCKETS
        .iter()
        .enumerate()
        .map(|(b, name)| {
            let rows: Vec<&ExampleRow> = examples.iter().filter(|e| tercile_of(e.ppl, cuts) == b).collect();
            TercileRow {
                bucket: name.to_string(),
                examples: rows.len(),
                mean_nll: mean(rows.iter().map(|e| e.nll)),
                accuracy: mean(rows.iter().map(|e| e.accuracy)),
            }
        })
        .collect();
    Aggregate {
        examples: examples.len(),
        targets,
        mean_nll,
        perplexity: mean_nll.exp(),
        accuracy: weighted(|e| e.accuracy),
        mean_lambda: mean(examples.iter().map(|e| e.mean_lambda)),
        retrieval_fraction: mean(examples.iter().map(|e| if e.retrieval_used { 1.0 } else { 0.0 })),
        terciles,
    }
}

impl EvalReport {
    /// Aggregates recomputed from the per-example rows.
    pub fn recompute_aggregate(&self) -> Aggregate {
        aggregate(&self.examples)
    }
}

fn score(index: usize, logits: &memrouter_autodiff::Tensor, tokens: &[usize], lambdas: &[f64], used: bool) -> ExampleRow {
    let nlls = token_nlls(logits, tokens);
    let hits = token_hits(logits, tokens);
    let n = nlls.len();
    let nll = mean(nlls.iter().copied());
    ExampleRow {
        index,
        targets: n,
        nll,
        ppl: nll.exp(),
        accuracy: mean(hits.iter().map(|&h| if h { 1.0 } else { 0.0 })),
        mean_lambda: mean(lambdas.iter().copied()),
        retrieval_used: used,
    }
}

fn zero_shot_example(model: &MoeModel, index: usize, tokens: &[usize]) -> Result<(ExampleRow, ExampleTiming)> {
    let start = Instant::now();
    let out = model.forward(tokens, Parametric)?;
    let row = score(index, &out.logits, tokens, &[], false);
    Ok((
        row,
        ExampleTiming {
            retrieval_seconds: 0.0,
            total_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

fn knn_example(
    model: &MoeModel,
    memory: &MemorySet,
    k: usize,
    index: usize,
    tokens: &[usize],
) -> Result<(ExampleRow, ExampleTiming)> {
    let start = Instant::now();
    let mut router = AdaptiveRouter::new(model, memory, k)?;
    let out = model.forward(tokens, &mut router)?;
    let row = score(index, &out.logits, tokens, &router.lambdas, true);
    Ok((
        row,
        ExampleTiming {
            retrieval_seconds: router.retrieval_time.as_secs_f64(),
            total_seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Scores every sequence of `corpus` (length ≥ 2) under `options.mode`.
pub fn evaluate(
    model: &MoeModel,
    corpus: &Corpus,
    options: &EvalOptions,
    memory: Option<&MemorySet>,
) -> Result<(EvalReport, EvalTiming)> {
    let start = Instant::now();
    let fp = fingerprint(model)?;
    let memory = match (options.mode, memory) {
        (EvalMode::ZeroShot, _) => None,
        (_, None) => return Err(Error::Config(format!("mode {} requires a memory", options.mode))),
        (_, Some(m)) => {
            m.check_compatible(model, Some(&fp))?;
            Some(m)
        }
    };
    let sequences: Vec<(usize, &Vec<usize>)> =
        corpus.sequences.iter().filter(|s| s.len() >= 2).enumerate().collect();
    let k = options.k_neighbors;

    let mut threshold = None;
    let results: Vec<(ExampleRow, ExampleTiming)> = match (options.mode, memory) {
        (EvalMode::ZeroShot, _) | (_, None) => sequences
            .par_iter()
            .map(|&(i, s)| zero_shot_example(model, i, s))
            .collect::<Result<_>>()?,
        (EvalMode::KnnMoe, Some(m)) => sequences
            .par_iter()
            .map(|&(i, s)| knn_example(model, m, k, i, s))
            .collect::<Result<_>>()?,
        (EvalMode::KnnMoeSelective, Some(m)) => {
            let base: Vec<(ExampleRow, ExampleTiming)> = sequences
                .par_iter()
                .map(|&(i, s)| zero_shot_example(model, i, s))
                .collect::<Result<_>>()?;
            let cut = options
                .selective_threshold
                .unwrap_or_else(|| tercile_cuts(&base.iter().map(|b| b.0.ppl).collect::<Vec<_>>()).0);
            threshold = Some(cut);
            sequences
                .par_iter()
                .zip(base)
                .map(|(&(i, s), (row, t))| {
                    if selective_gate(row.ppl, cut) {
                        let (r, kt) = knn_example(model, m, k, i, s)?;
                        Ok((
                            r,
                            ExampleTiming {
                                retrieval_seconds: kt.retrieval_seconds,
                                total_seconds: kt.total_seconds + t.total_seconds,
                            },
                        ))
                    } else {
                        Ok((row, t))
                    }
                })
                .collect::<Result<_>>()?
        }
    };
    let (examples, timings): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = EvalReport {
        meta: RunMeta {
            mode: Some(options.mode),
            k_neighbors: k,
            fingerprint: fp,
            selective_threshold: threshold,
            ..RunMeta::default()
        },
        aggregate: aggregate(&examples),
        examples,
    };
    let timing = EvalTiming {
        examples: timings,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, timing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketDelta {
    pub bucket: String,
    pub examples: usize,
    pub baseline_nll: f64,
    pub treated_nll: f64,
    /// `treated − baseline`; negative is an improvement.
    pub nll_delta: f64,
    pub baseline_accuracy: f64,
    pub treated_accuracy: f64,
    pub accuracy_delta: f64,
    /// `1 − exp(nll_delta)`: relative perplexity reduction.
    pub ppl_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAnalysis {
    pub cuts: (f64, f64),
    pub buckets: Vec<BucketDelta>,
}

/// Splits examples into baseline-PPL terciles and compares the two reports
/// within each.
pub fn bucket_analysis(baseline: &EvalReport, treated: &EvalReport) -> Result<BucketAnalysis> {
    if baseline.examples.len() != treated.examples.len()
        || baseline
            .examples
            .iter()
            .zip(&treated.examples)
            .any(|(a, b)| a.index != b.index || a.targets != b.targets)
    {
        return Err(Error::Invalid("bucket analysis needs reports over the same examples".into()));
    }
    let cuts = tercile_cuts(&baseline.examples.iter().map(|e| e.ppl).collect::<Vec<_>>());
    let buckets = BUCKETS
        .iter()
        .enumerate()
        .map(|(b, name)| {
            let pairs: Vec<_> = baseline
                .examples
                .iter()
                .zip(&treated.examples)
                .filter(|(e, _)| tercile_of(e.ppl, cuts) == b)
                .collect();
            let tokens: usize = pairs.iter().map(|(e, _)| e.targets).sum();
            let weighted = |f: &dyn Fn(&ExampleRow) -> f64, pick: usize| {
                if tokens == 0 {
                    return 0.0;
                }
                pairs
                    .iter()
                    .map(|p| {
                        let e = if pick == 0 { p.0 } else { p.1 };
                        f(e) * e.targets as f64
                    })
                    .sum::<f64>()
                    / tokens as f64
            };
            let (bn, tn) = (weighted(&|e| e.nll, 0), weighted(&|e| e.nll, 1));
            let (ba, ta) = (weighted(&|e| e.accuracy, 0), weighted(&|e| e.accuracy, 1));
            BucketDelta {
                bucket: name.to_string(),
                examples: pairs.len(),
                baseline_nll: bn,
                treated_nll: tn,
                nll_delta: tn - bn,
                baseline_accuracy: ba,
                treated_accuracy: ta,
                accuracy_delta: ta - ba,
                ppl_gain: 1.0 - (tn - bn).exp(),
            }
        })
        .collect();
    Ok(BucketAnalysis { cuts, buckets })
}

/// Axes of an ablation sweep; every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub k_neighbors: Vec<usize>,
    pub steps: Vec<usize>,
    pub ref_tokens: Vec<usize>,
    pub kernels: Vec<Kernel>,
    pub selective: Vec<bool>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            k_neighbors: vec![1],
            steps: vec![1],
            ref_tokens: vec![1000],
            kernels: vec![Kernel::Rbf],
            selective: vec![false],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors.is_empty()
            || self.steps.is_empty()
            || self.ref_tokens.is_empty()
            || self.kernels.is_empty()
            || self.selective.is_empty()
        {
            return Err(Error::Config("every sweep axis needs at least one value".into()));
        }
        Ok(())
    }
}

/// Fixed inputs shared by every sweep cell.
#[derive(Debug, Clone)]
pub struct SweepBase<'a> {
    pub model: &'a MoeModel,
    pub reference: &'a Corpus,
    pub test: &'a Corpus,
    pub eta: f64,
    pub mode: BuildMode,
    pub accept_only_improving: bool,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub k_neighbors: usize,
    pub steps: usize,
    pub ref_tokens: usize,
    pub kernel: Kernel,
    pub selective: bool,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub baseline: EvalReport,
    pub cells: Vec<SweepCell>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTiming {
    /// Build time of each cached memory, keyed `"S={steps},tokens={n}"`.
    pub builds: Vec<(String, f64)>,
    pub cells: Vec<EvalTiming>,
}

type CacheKey = (String, String, usize, u64, BuildMode);

/// Evaluates every grid cell; failures are recorded per cell. Memories are
/// built once per (checkpoint, reference corpus, S, η, mode).
pub fn ablation_sweep(grid: &SweepGrid, base: &SweepBase<'_>) -> Result<(SweepTable, SweepTiming)> {
    grid.validate()?;
    let fp = fingerprint(base.model)?;
    let (baseline, _) = evaluate(base.model, base.test, &EvalOptions::default(), None)?;
    let mut cache: HashMap<CacheKey, std::result::Result<MemorySet, String>> = HashMap::new();
    let mut timing = SweepTiming::default();
    let mut cells = Vec::new();

    for &steps in &grid.steps {
        for &tokens in &grid.ref_tokens {
            let reference = base.reference.take_tokens(tokens);
            let key = (fp.clone(), reference.hash(), steps, base.eta.to_bits(), base.mode);
            if !cache.contains_key(&key) {
                let params = BuildParams {
                    eta: base.eta,
                    steps,
                    mode: base.mode,
                    accept_only_improving: base.accept_only_improving,
                };
                let sim = SimilarityConfig {
                    kernel: Kernel::Rbf,
                    gamma: base.gamma,
                };
                let built = build_memory(base.model, &reference, &params, sim);
                let entry = match built {
                    Ok((m, _, t)) => {
                        timing.builds.push((format!("S={steps},tokens={tokens}"), t.total_seconds));
                        Ok(m)
                    }
                    Err(e) => Err(e.to_string()),
                };
                cache.insert(key.clone(), entry);
            }
            for &kernel in &grid.kernels {
                let memory = cache[&key].clone().and_then(|m| {
                    m.with_similarity(SimilarityConfig {
                        kernel,
                        gamma: base.gamma,
                    })
                    .map_err(|e| e.to_string())
                });
                for &k in &grid.k_neighbors {
                    for &selective in &grid.selective {
                        let options = EvalOptions {
                            mode: if selective {
                                EvalMode::KnnMoeSelective
                            } else {
                                EvalMode::KnnMoe
                            },
                            k_neighbors: k,
                            selective_threshold: None,
                        };
                        let result = memory
                            .as_ref()
                            .map_err(Clone::clone)
                            .and_then(|m| evaluate(base.model, base.test, &options, Some(m)).map_err(|e| e.to_string()));
                        let (report, error) = match result {
                            Ok((mut r, t)) => {
                                r.meta.build_steps = Some(steps);
                                r.meta.ref_tokens = Some(tokens);
                                r.meta.kernel = Some(kernel);
                                timing.cells.push(t);
                                (Some(r), None)
                            }
                            Err(e) => {
                                timing.cells.push(EvalTiming::default());
                                (None, Some(e))
                            }
                        };
                        cells.push(SweepCell {
                            k_neighbors: k,
                            steps,
                            ref_tokens: tokens,
                            kernel,
                            selective,
                            report,
                            error,
                        });
                    }
                }
            }
        }
    }
    Ok((SweepTable { baseline, cells }, timing))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?} (csv | json)"))),
        }
    }
}

pub const CSV_HEADER: &str = "report,mode,k,steps,ref_tokens,kernel,index,targets,nll,ppl,accuracy,mean_lambda,retrieval_used";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per example of every report, prefixed by the report's position.
pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (r, rep) in reports.iter().enumerate() {
        let m = &rep.meta;
        for e in &rep.examples {
            // `{:?}` on f64 prints the shortest string that parses back exactly
            let _ = writeln!(
                out,
                "{r},{},{},{},{},{},{},{},{:?},{:?},{:?},{:?},{}",
                opt(m.mode),
                m.k_neighbors,
                opt(m.build_steps),
                opt(m.ref_tokens),
                opt(m.kernel),
                e.index,
                e.targets,
                e.nll,
                e.ppl,
                e.accuracy,
                e.mean_lambda,
                e.retrieval_used
            );
        }
    }
    out
}

pub fn emit_report(reports: &[EvalReport], path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => reports_to_csv(reports),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json_reports(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Sum of per-example retrieval times.
pub fn total_retrieval(timing: &EvalTiming) -> Duration {
    Duration::from_secs_f64(timing.examples.iter().map(|e| e.retrieval_seconds).sum())
}
