//! Pipeline stages. Each stage reads the artifacts of earlier stages from the
//! output directory and writes its own next to them, plus a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memrouter_core::builder::build_memory;
use memrouter_core::checkpoint::{fingerprint, load_checkpoint, save_checkpoint};
use memrouter_core::data::{generate_corpus, Corpus};
use memrouter_core::eval::{
    ablation_sweep, bucket_analysis, emit_report, evaluate, BucketAnalysis, EvalMode, EvalOptions, EvalReport,
    EvalTiming, ReportFormat, SweepBase,
};
use memrouter_core::memfile::{load_memory, save_memory};
use memrouter_core::store::MemorySet;
use memrouter_core::train::pretrain;
use memrouter_core::MoeModel;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::check::run_checks;
use crate::config::RunConfig;

pub const TRAIN_CORPUS: &str = "train.corpus";
pub const REFERENCE_CORPUS: &str = "reference.corpus";
pub const TEST_CORPUS: &str = "test.corpus";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.json";
pub const MEMORY: &str = "memory.mem";
pub const BUILD_REPORT: &str = "build_report.json";
pub const BUILD_TIMING: &str = "build.timing.json";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const BUCKETS: &str = "buckets.json";
pub const EVAL_TIMING: &str = "eval.timing.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_TIMING: &str = "sweep.timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    GenData,
    Train,
    BuildMemory,
    Eval,
    Sweep,
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::BuildMemory => "build-memory",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Check => "check",
        }
    }
}

/// Everything needed to reproduce one stage: the effective config and the
/// content hashes of what it read and wrote.
#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'static str,
    pub version: &'static str,
    pub config: &'a RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock files; not hashed since they differ on every run.
    pub timing: Vec<&'static str>,
}

pub fn manifest_name(command: Command) -> String {
    format!("manifest.{}.json", command.name())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Stage<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    inputs: Vec<&'static str>,
    outputs: Vec<&'static str>,
    timing: Vec<&'static str>,
}

impl<'a> Stage<'a> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&mut self, name: &'static str, what: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.is_file() {
            bail!("missing {what} {}: run `{producer}` first", p.display());
        }
        self.inputs.push(name);
        Ok(p)
    }

    fn output(&mut self, name: &'static str) -> PathBuf {
        self.outputs.push(name);
        self.path(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &'static str, value: &T) -> Result<()> {
        let p = self.output(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn write_timing<T: Serialize>(&mut self, name: &'static str, value: &T) -> Result<()> {
        self.timing.push(name);
        let p = self.path(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn checkpoint(&mut self) -> Result<MoeModel> {
        let p = self.input(CHECKPOINT, "checkpoint", "train")?;
        load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))
    }

    fn corpus(&mut self, name: &'static str) -> Result<Corpus> {
        let p = self.input(name, "corpus", "gen-data")?;
        let c = Corpus::load(&p)?;
        if c.vocab_size != self.cfg.model.vocab_size {
            bail!(
                "{} has vocabulary {} but model.vocab_size is {}",
                p.display(),
                c.vocab_size,
                self.cfg.model.vocab_size
            );
        }
        Ok(c)
    }

    fn finish(self, command: Command) -> Result<()> {
        let hashes = |names: &[&str]| -> Result<BTreeMap<String, String>> {
            names.iter().map(|n| Ok((n.to_string(), file_hash(&self.path(n))?))).collect()
        };
        let manifest = Manifest {
            command: command.name(),
            version: env!("CARGO_PKG_VERSION"),
            config: self.cfg,
            inputs: hashes(&self.inputs)?,
            outputs: hashes(&self.outputs)?,
            timing: self.timing.clone(),
        };
        let p = self.path(&manifest_name(command));
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

/// Runs one stage. Returns `false` only when `check` finds a failing case.
pub fn run(command: Command, cfg: &RunConfig) -> Result<bool> {
    if command == Command::Check {
        let mut ok = true;
        for r in run_checks() {
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            match &r.outcome {
                Ok(e) => println!("{verdict} {} (max relative error {e:.3e})", r.name),
                Err(e) => println!("{verdict} {} ({e})", r.name),
            }
            ok &= r.passed();
        }
        println!("{}", if ok { "PASS" } else { "FAIL" });
        return Ok(ok);
    }
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut stage = Stage {
        cfg,
        dir,
        inputs: Vec::new(),
        outputs: Vec::new(),
        timing: Vec::new(),
    };
    match command {
        Command::GenData => gen_data(&mut stage)?,
        Command::Train => train(&mut stage)?,
        Command::BuildMemory => build(&mut stage)?,
        Command::Eval => eval(&mut stage)?,
        Command::Sweep => sweep(&mut stage)?,
        Command::Check => unreachable!("handled above"),
    }
    stage.finish(command)?;
    Ok(true)
}

fn gen_data(stage: &mut Stage) -> Result<()> {
    let data = &stage.cfg.data;
    for (name, spec) in [
        (TRAIN_CORPUS, &data.train),
        (REFERENCE_CORPUS, &data.reference),
        (TEST_CORPUS, &data.test),
    ] {
        let corpus = generate_corpus(&stage.cfg.seeded(spec))?;
        corpus.save(stage.output(name))?;
        println!("{name}: {} sequences, {} tokens", corpus.sequences.len(), corpus.total_tokens());
    }
    Ok(())
}

fn train(stage: &mut Stage) -> Result<()> {
    let cfg = stage.cfg;
    let corpus = stage.corpus(TRAIN_CORPUS)?;
    let (model, log) = pretrain(&cfg.model, &corpus, &cfg.train, cfg.seeds.init, cfg.seeds.shuffle)?;
    save_checkpoint(&model, stage.output(CHECKPOINT))?;
    stage.write_json(TRAIN_LOG, &log)?;
    println!(
        "trained {} steps, final loss {:.4}, fingerprint {}",
        log.losses.len(),
        log.losses.last().copied().unwrap_or(f64::NAN),
        fingerprint(&model)?
    );
    Ok(())
}

fn build(stage: &mut Stage) -> Result<()> {
    let cfg = stage.cfg;
    let model = stage.checkpoint()?;
    let reference = stage.corpus(REFERENCE_CORPUS)?.take_tokens(cfg.data.ref_tokens);
    let (memory, report, timing) = build_memory(&model, &reference, &cfg.build, cfg.similarity())?;
    save_memory(&memory, stage.output(MEMORY))?;
    stage.write_json(BUILD_REPORT, &report)?;
    stage.write_timing(BUILD_TIMING, &timing)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "memory: {} entries over {} layers; reference NLL {:.4} -> {:.4}, {:.1}% of tokens improved",
        memory.total_entries(),
        memory.layers.len(),
        report.mean_nll_before,
        report.mean_nll_after,
        100.0 * report.fraction_improved
    );
    Ok(())
}

/// The memory file keeps its own kernel and γ unless the config asks for
/// something different.
fn retune(memory: MemorySet, cfg: &RunConfig) -> Result<MemorySet> {
    let sim = cfg.similarity();
    let same = memory.layers.iter().all(|l| l.kernel() == sim.kernel) && sim.gamma.is_none();
    Ok(if same { memory } else { memory.with_similarity(sim)? })
}

#[derive(Serialize)]
struct ModeTiming<'a> {
    mode: EvalMode,
    timing: &'a EvalTiming,
}

#[derive(Serialize)]
struct ModeBuckets {
    mode: EvalMode,
    analysis: BucketAnalysis,
}

fn eval(stage: &mut Stage) -> Result<()> {
    let cfg = stage.cfg;
    let model = stage.checkpoint()?;
    let test = stage.corpus(TEST_CORPUS)?;
    let memory = if cfg.eval.modes.iter().any(|m| *m != EvalMode::ZeroShot) {
        let p = stage.input(MEMORY, "memory", "build-memory")?;
        Some(retune(load_memory(&p)?, cfg)?)
    } else {
        None
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut timings = Vec::new();
    for &mode in &cfg.eval.modes {
        let options = EvalOptions {
            mode,
            k_neighbors: cfg.retrieval.k_neighbors,
            selective_threshold: cfg.eval.selective_threshold,
        };
        let memory = if mode == EvalMode::ZeroShot { None } else { memory.as_ref() };
        let (mut report, timing) = evaluate(&model, &test, &options, memory)?;
        report.meta.seeds = Some(cfg.seeds);
        if mode != EvalMode::ZeroShot {
            report.meta.build_steps = Some(cfg.build.steps);
            report.meta.ref_tokens = Some(cfg.data.ref_tokens);
            report.meta.kernel = memory.and_then(|m| m.layers.first()).map(|l| l.kernel());
        }
        println!(
            "{mode}: ppl {:.4}, accuracy {:.4}, mean lambda {:.4}",
            report.aggregate.perplexity, report.aggregate.accuracy, report.aggregate.mean_lambda
        );
        reports.push(report);
        timings.push(timing);
    }
    emit_report(&reports, stage.output(EVAL_JSON), ReportFormat::Json)?;
    emit_report(&reports, stage.output(EVAL_CSV), ReportFormat::Csv)?;
    let treated = reports.iter().any(|r| r.meta.mode != Some(EvalMode::ZeroShot));
    let baseline = reports.iter().find(|r| r.meta.mode == Some(EvalMode::ZeroShot));
    if let (Some(baseline), true) = (baseline, treated) {
        let buckets = reports
            .iter()
            .filter(|r| r.meta.mode != Some(EvalMode::ZeroShot))
            .map(|r| {
                Ok(ModeBuckets {
                    mode: r.meta.mode.expect("evaluate sets the mode"),
                    analysis: bucket_analysis(baseline, r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        stage.write_json(BUCKETS, &buckets)?;
    }
    let timing: Vec<ModeTiming> = cfg
        .eval
        .modes
        .iter()
        .zip(&timings)
        .map(|(&mode, timing)| ModeTiming { mode, timing })
        .collect();
    stage.write_timing(EVAL_TIMING, &timing)?;
    Ok(())
}

fn sweep(stage: &mut Stage) -> Result<()> {
    let cfg = stage.cfg;
    let model = stage.checkpoint()?;
    let reference = stage.corpus(REFERENCE_CORPUS)?;
    let test = stage.corpus(TEST_CORPUS)?;
    let base = SweepBase {
        model: &model,
        reference: &reference,
        test: &test,
        eta: cfg.build.eta,
        mode: cfg.build.mode,
        accept_only_improving: cfg.build.accept_only_improving,
        gamma: cfg.retrieval.gamma,
    };
    let (mut table, timing) = ablation_sweep(&cfg.sweep, &base)?;
    table.baseline.meta.seeds = Some(cfg.seeds);
    for cell in &mut table.cells {
        if let Some(r) = &mut cell.report {
            r.meta.seeds = Some(cfg.seeds);
        }
    }
    let base_ppl = table.baseline.aggregate.perplexity;
    println!("ZERO_SHOT: ppl {base_ppl:.4}");
    for c in &table.cells {
        match (&c.report, &c.error) {
            (Some(r), _) => println!(
                "K={} S={} tokens={} kernel={} selective={}: ppl {:.4} ({:+.2}%)",
                c.k_neighbors,
                c.steps,
                c.ref_tokens,
                c.kernel,
                c.selective,
                r.aggregate.perplexity,
                100.0 * (r.aggregate.perplexity / base_ppl - 1.0)
            ),
            (None, e) => println!(
                "K={} S={} tokens={} kernel={} selective={}: failed: {}",
                c.k_neighbors,
                c.steps,
                c.ref_tokens,
                c.kernel,
                c.selective,
                e.as_deref().unwrap_or("unknown error")
            ),
        }
    }
    let reports: Vec<EvalReport> = std::iter::once(table.baseline.clone())
        .chain(table.cells.iter().filter_map(|c| c.report.clone()))
        .collect();
    emit_report(&reports, stage.output(SWEEP_CSV), ReportFormat::Csv)?;
    stage.write_json(SWEEP_JSON, &table)?;
    stage.write_timing(SWEEP_TIMING, &timing)?;
    Ok(())
}
