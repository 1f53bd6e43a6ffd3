//! Decode replay against evicted caches.
//!
//! Eviction happens once, after prefill. Each recorded decode vector is then
//! scored by the fraction of its mass that falls on surviving positions:
//! kept prompt positions plus every earlier decode token.

use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_mask, BaselineConfig};
use crate::error::{Error, Result};
use crate::mask::EvictionMask;
use crate::policy::{madakv_mask, PolicyConfig, PolicyMode};
use crate::trace::{AttentionTrace, TraceHeader};

/// K and V, 128-dim heads, fp16.
pub const DEFAULT_BYTES_PER_ENTRY: u64 = 2 * 128 * 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy_name: String,
    pub budget_frac: f64,
    pub per_step_retained_mass: Vec<f64>,
    pub mean_retained_mass: f64,
    /// `[layer][head]` kept prompt positions.
    pub per_layer_kept_counts: Vec<Vec<usize>>,
    /// Kept prompt positions over `L * H * n`.
    pub kept_fraction: f64,
    pub memory_bytes_est: u64,
    pub plan_warnings: Vec<String>,
    /// Set when the policy could not be evaluated.
    pub error: Option<String>,
}

impl SimReport {
    pub fn failed(name: String, budget_frac: f64, err: &Error) -> Self {
        SimReport {
            policy_name: name,
            budget_frac,
            per_step_retained_mass: Vec::new(),
            mean_retained_mass: 0.0,
            per_layer_kept_counts: Vec::new(),
            kept_fraction: 0.0,
            memory_bytes_est: 0,
            plan_warnings: vec![format!("error: {err}")],
            error: Some(err.to_string()),
        }
    }
}

/// Replays every decode step of `trace` against `mask`.
pub fn replay(trace: &AttentionTrace, mask: &EvictionMask) -> Result<SimReport> {
    replay_with(trace, mask, DEFAULT_BYTES_PER_ENTRY)
}

pub fn replay_with(
    trace: &AttentionTrace,
    mask: &EvictionMask,
    bytes_per_entry: u64,
) -> Result<SimReport> {
    mask.check_shape(trace)?;
    let (l_count, h_count, n) = (trace.num_layers(), trace.num_heads(), trace.prompt_len());
    let heads = (l_count * h_count) as f64;
    let mut per_step = Vec::with_capacity(trace.num_decode_steps());
    for step in 1..=trace.num_decode_steps() {
        let mut acc = 0.0;
        for layer in 0..l_count {
            for head in 0..h_count {
                let keep = mask.keep(layer, head);
                let row = trace.decode_row(step, layer, head);
                acc += retained_fraction(row, keep, n);
            }
        }
        per_step.push((acc / heads).clamp(0.0, 1.0));
    }
    let mut plan_warnings = mask.warnings.clone();
    let mean = if per_step.is_empty() {
        plan_warnings.push("trace has no decode steps; retained mass undefined".into());
        0.0
    } else {
        per_step.iter().sum::<f64>() / per_step.len() as f64
    };
    let kept = mask.total_kept();
    Ok(SimReport {
        policy_name: "custom".into(),
        budget_frac: kept as f64 / (l_count * h_count * n) as f64,
        per_step_retained_mass: per_step,
        mean_retained_mass: mean,
        per_layer_kept_counts: mask.kept_counts(),
        kept_fraction: kept as f64 / (l_count * h_count * n) as f64,
        memory_bytes_est: estimate_memory(trace.header(), mask, bytes_per_entry),
        plan_warnings,
        error: None,
    })
}

/// Share of `row` on positions that survive: kept prompt positions and all
/// decode positions (index `>= n`).
fn retained_fraction(row: &[f64], keep: &[bool], n: usize) -> f64 {
    let (mut kept, mut total) = (0.0, 0.0);
    for (j, &a) in row.iter().enumerate() {
        total += a;
        if j >= n || keep[j] {
            kept += a;
        }
    }
    if total > 0.0 {
        kept / total
    } else {
        1.0
    }
}

/// Bytes held by the kept prompt entries: linear in the kept counts.
pub fn estimate_memory(header: &TraceHeader, mask: &EvictionMask, bytes_per_entry: u64) -> u64 {
    debug_assert_eq!(header.num_layers, mask.num_layers());
    mask.total_kept() as u64 * bytes_per_entry
}

/// A policy to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum PolicySpec {
    Madakv(PolicyConfig),
    Baseline(BaselineConfig),
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Madakv(cfg) => format!("madakv-{}", cfg.mode.as_str()),
            PolicySpec::Baseline(cfg) => cfg.kind.name().to_string(),
        }
    }

    pub fn budget_frac(&self) -> f64 {
        match self {
            PolicySpec::Madakv(cfg) => cfg.budget_frac,
            PolicySpec::Baseline(cfg) => cfg.budget_frac,
        }
    }

    pub fn with_budget(mut self, budget_frac: f64) -> Self {
        match &mut self {
            PolicySpec::Madakv(cfg) => cfg.budget_frac = budget_frac,
            PolicySpec::Baseline(cfg) => cfg.budget_frac = budget_frac,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicySpec::Madakv(cfg) => cfg.validate(),
            PolicySpec::Baseline(cfg) => cfg.validate(),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, PolicySpec::Madakv(cfg) if cfg.mode == PolicyMode::Adaptive)
    }

    pub fn mask(&self, trace: &AttentionTrace) -> Result<EvictionMask> {
        match self {
            PolicySpec::Madakv(cfg) => Ok(madakv_mask(trace, cfg)?.1),
            PolicySpec::Baseline(cfg) => baseline_mask(trace, cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub bytes_per_entry: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            bytes_per_entry: DEFAULT_BYTES_PER_ENTRY,
        }
    }
}

/// Masks and replays one policy. Failures are returned, not recorded.
pub fn run_policy(
    trace: &AttentionTrace,
    policy: &PolicySpec,
    opts: &SimOptions,
) -> Result<SimReport> {
    let mask = policy.mask(trace)?;
    let mut report = replay_with(trace, &mask, opts.bytes_per_entry)?;
    report.policy_name = policy.name();
    report.budget_frac = policy.budget_frac();
    Ok(report)
}

/// Evaluates every policy on the same trace. Reports are ordered by mean
/// retained mass (descending), then name; failed policies sort last and
/// carry their error.
pub fn compare(
    trace: &AttentionTrace,
    policies: &[PolicySpec],
    opts: &SimOptions,
) -> Result<Vec<SimReport>> {
    if policies.is_empty() {
        return Err(Error::Parameter("compare needs at least one policy".into()));
    }
    let mut reports: Vec<SimReport> = policies
        .iter()
        .map(|p| {
            run_policy(trace, p, opts)
                .unwrap_or_else(|e| SimReport::failed(p.name(), p.budget_frac(), &e))
        })
        .collect();
    reports.sort_by(|a, b| {
        a.error
            .is_some()
            .cmp(&b.error.is_some())
            .then(b.mean_retained_mass.total_cmp(&a.mean_retained_mass))
            .then_with(|| a.policy_name.cmp(&b.policy_name))
    });
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::BaselineKind;
    use crate::synth::{generate_synthetic, uniform_trace, SyntheticTraceSpec};
    use crate::trace::Modality;

    #[test]
    fn keep_all_retains_everything() {
        let s = SyntheticTraceSpec::uniform_bias(2, 2, 30, 4, 1.2, 0.5, 0.3, 1);
        let trace = generate_synthetic(&s).unwrap();
        let report = replay(&trace, &EvictionMask::keep_all(trace.header())).unwrap();
        assert_eq!(report.per_step_retained_mass, vec![1.0; 4]);
        assert_eq!(report.mean_retained_mass, 1.0);
    }

    #[test]
    fn empty_mask_loses_prompt_mass() {
        let trace = uniform_trace(1, 1, vec![Modality::Text; 4], 2).unwrap();
        let report = replay(&trace, &EvictionMask::empty(trace.header())).unwrap();
        assert_eq!(report.per_step_retained_mass[0], 0.0);
        // step 2 sees one decode token out of five positions
        assert!((report.per_step_retained_mass[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn hand_built_five_token_trace() {
        let header = TraceHeader {
            num_layers: 1,
            num_heads: 1,
            prompt_len: 5,
            num_decode_steps: 1,
            modality_labels: vec![Modality::Text; 5],
        };
        let tri: Vec<f64> = (0..5)
            .flat_map(|i| vec![1.0 / (i + 1) as f64; i + 1])
            .collect();
        let decode = vec![vec![vec![vec![0.3, 0.1, 0.05, 0.15, 0.4]]]];
        let trace = AttentionTrace::new(header, vec![vec![tri]], decode).unwrap();
        let mut mask = EvictionMask::empty(trace.header());
        mask.keep_mut(0, 0)[0] = true;
        mask.keep_mut(0, 0)[4] = true;
        let report = replay(&trace, &mask).unwrap();
        // 0.3 + 0.4, summed by hand
        assert!((report.mean_retained_mass - 0.7).abs() < 1e-12);
    }

    #[test]
    fn memory_is_linear_in_kept_counts() {
        let trace = uniform_trace(2, 2, vec![Modality::Text; 10], 0).unwrap();
        let full = estimate_memory(trace.header(), &EvictionMask::keep_all(trace.header()), 512);
        let cfg = BaselineConfig::new(BaselineKind::RecentWindow, 0.2);
        let mask = baseline_mask(&trace, &cfg).unwrap();
        let part = estimate_memory(trace.header(), &mask, 512);
        assert_eq!(full, 40 * 512);
        assert_eq!(part as f64 / full as f64, 0.2);
        assert_eq!(
            estimate_memory(trace.header(), &EvictionMask::empty(trace.header()), 512),
            0
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = uniform_trace(1, 1, vec![Modality::Text; 4], 1).unwrap();
        let b = uniform_trace(1, 2, vec![Modality::Text; 4], 1).unwrap();
        let err = replay(&a, &EvictionMask::keep_all(b.header())).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn compare_orders_and_isolates_failures() {
        let s = SyntheticTraceSpec::uniform_bias(2, 2, 50, 3, 1.2, 0.5, 0.5, 9);
        let trace = generate_synthetic(&s).unwrap();
        let bad = BaselineConfig {
            sink_count: 100,
            ..BaselineConfig::new(BaselineKind::SinkWindow, 0.2)
        };
        let policies = [
            PolicySpec::Baseline(BaselineConfig::new(BaselineKind::RecentWindow, 0.2)),
            PolicySpec::Baseline(bad),
            PolicySpec::Madakv(PolicyConfig::default()),
            PolicySpec::Madakv(PolicyConfig::default()),
        ];
        let reports = compare(&trace, &policies, &SimOptions::default()).unwrap();
        assert_eq!(reports.len(), 4);
        assert!(reports[3].error.is_some());
        assert!(reports[..3]
            .windows(2)
            .all(|w| w[0].mean_retained_mass >= w[1].mean_retained_mass));
        let mada: Vec<_> = reports
            .iter()
            .filter(|r| r.policy_name == "madakv-adaptive")
            .collect();
        assert_eq!(mada[0], mada[1]);
        assert!(compare(&trace, &[], &SimOptions::default()).is_err());
    }

    #[test]
    fn replay_does_not_touch_trace() {
        let s = SyntheticTraceSpec::uniform_bias(1, 2, 20, 2, 1.0, 0.5, 0.5, 2);
        let trace = generate_synthetic(&s).unwrap();
        let before = trace.checksum();
        let policies = [PolicySpec::Madakv(PolicyConfig::default())];
        compare(&trace, &policies, &SimOptions::default()).unwrap();
        assert_eq!(trace.checksum(), before);
    }
}
