//! A toy Mixture-of-Experts transformer whose routing can be corrected at
//! inference time by a per-layer nearest-neighbor memory of optimised expert
//! assignments.

pub mod builder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gating;
pub mod memfile;
pub mod model;
pub mod router;
pub mod store;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use gating::{pi, GatingVector};
pub use model::{Directive, ForwardOutput, MoeModel, Parametric, RoutingPlan, RoutingPolicy, Trace};
