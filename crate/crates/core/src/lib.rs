//! Trace-driven simulation of modality-adaptive KV-cache eviction.
//!
//! The crate consumes recorded (or synthetic) post-softmax attention traces,
//! decides which prompt positions each `(layer, head)` keeps under a cache
//! budget, and replays decode steps to measure how much attention mass the
//! surviving cache still covers.
//!
//! * [`trace`] / [`format`] / [`synth`]: the trace model, its file encodings
//!   and a seeded generator.
//! * [`importance`]: proxy-token importance, modality preference weights and
//!   descriptive sparsity statistics.
//! * [`policy`]: preference-split budgets and cross-layer compensation.
//! * [`baseline`]: window, heavy-hitter and fixed-priority reference policies.
//! * [`sim`] / [`report`]: decode replay, memory model and result tables.

pub mod baseline;
pub mod error;
pub mod format;
pub mod importance;
pub mod mask;
pub mod policy;
pub mod report;
pub mod sim;
pub mod synth;
pub mod trace;

pub use baseline::{baseline_mask, BaselineConfig, BaselineKind};
pub use error::{Error, Result};
pub use format::{load_trace, save_trace, save_trace_binary};
pub use importance::{
    compute_preference, compute_psi, head_modality_share, sparsity_curve, ImportanceVector,
    PreferenceWeights, ProxyConfig,
};
pub use mask::EvictionMask;
pub use policy::{build_masks, madakv_mask, plan_budgets, BudgetPlan, PolicyConfig, PolicyMode};
pub use sim::{compare, estimate_memory, replay, PolicySpec, SimOptions, SimReport};
pub use synth::{generate_synthetic, heterogeneous_suite, SyntheticTraceSpec};
pub use trace::{AttentionTrace, Modality, TraceHeader};
