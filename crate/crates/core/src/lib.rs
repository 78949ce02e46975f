//! Layer-importance analysis for transformer language models.
//!
//! Per-layer activation traces go in ([`trace`]); per-layer variance and
//! sparsity statistics ([`stats`]) are combined into a variance-over-sparsity
//! score, normalized and ranked ([`score`]); a selection policy from the
//! [`policy`] registry turns the ranking into a pruning plan. The [`toy`]
//! module provides a small byte-level transformer on which plans can be
//! evaluated end to end, and [`pipeline`] wires the stages together the way
//! the `avss` command-line tool uses them.

// `!(x >= 0.0)` is used on purpose so that NaN fails range checks
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod score;
pub mod stats;
pub mod toy;
pub mod trace;

pub use error::{Error, Result};
pub use policy::{PolicyRegistry, PruningPlan, SelectionPolicy};
pub use score::{rank_layers, AvssEntry};
pub use stats::{compute_layer_stats, LayerStats, StatsConfig};
pub use trace::{ActivationPoint, Dtype, LayerTrace, TraceSet};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
