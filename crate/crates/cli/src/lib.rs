//! Command-line pipeline: generate corpora, pretrain, build a routing memory,
//! evaluate and sweep, all driven by one JSON config.

pub mod check;
pub mod config;
pub mod run;

use anyhow::{bail, Context, Result};

pub const THREADS_ENV: &str = "MOE_MEMROUTER_THREADS";

/// Caps the global worker pool at `MOE_MEMROUTER_THREADS` when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV}={raw:?} is not a thread count"))?;
    if n == 0 {
        bail!("{THREADS_ENV} must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}
