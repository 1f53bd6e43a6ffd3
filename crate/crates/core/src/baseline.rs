//! Reference eviction policies reduced to their core selection rules.
//!
//! * `RecentWindow` keeps the last `B` prompt positions (sliding window).
//! * `SinkWindow` keeps `sink_count` leading positions plus the most recent
//!   ones (attention sinks plus window).
//! * `CumulativeTopK` ranks positions by the attention they receive over the
//!   trailing `observation_window` prefill rows and keeps the top `B`,
//!   regardless of modality. With no window every prefill row counts
//!   (heavy-hitter style); a short window gives the observation-window
//!   variant.
//! * `FixedModalityPriority` uses the same scores but fills a fixed share of
//!   the budget with text first and the rest with visual tokens.
//!
//! Every policy uses the same budget for every `(layer, head)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{select_top, EvictionMask};
use crate::trace::{AttentionTrace, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    RecentWindow,
    SinkWindow,
    CumulativeTopK,
    FixedModalityPriority,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::RecentWindow,
        BaselineKind::SinkWindow,
        BaselineKind::CumulativeTopK,
        BaselineKind::FixedModalityPriority,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::RecentWindow => "recent-window",
            BaselineKind::SinkWindow => "sink-window",
            BaselineKind::CumulativeTopK => "cumulative-topk",
            BaselineKind::FixedModalityPriority => "fixed-modality-priority",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub budget_frac: f64,
    pub sink_count: usize,
    pub text_priority_frac: f64,
    /// Trailing prefill rows used for scoring; `None` uses every row.
    pub observation_window: Option<usize>,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind, budget_frac: f64) -> Self {
        BaselineConfig {
            kind,
            budget_frac,
            sink_count: 4,
            text_priority_frac: 1.0,
            observation_window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget_frac > 0.0 && self.budget_frac <= 1.0) {
            return Err(Error::Parameter(format!(
                "budget_frac must lie in (0, 1], got {}",
                self.budget_frac
            )));
        }
        if !(0.0..=1.0).contains(&self.text_priority_frac) {
            return Err(Error::Parameter(format!(
                "text_priority_frac must lie in [0, 1], got {}",
                self.text_priority_frac
            )));
        }
        if self.observation_window == Some(0) {
            return Err(Error::Parameter(
                "observation_window must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Kept positions per head: `round(budget_frac * n)` clamped to `[1, n]`.
    pub fn budget(&self, n: usize) -> usize {
        ((self.budget_frac * n as f64).round() as usize).clamp(1, n)
    }
}

/// Attention received by each prompt position over the trailing `window` prefill rows.
pub fn cumulative_scores(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    window: Option<usize>,
) -> Vec<f64> {
    let n = trace.prompt_len();
    let start = n - window.unwrap_or(n).min(n);
    let mut scores = vec![0.0; n];
    for row in start..n {
        for (s, &a) in scores.iter_mut().zip(trace.prefill_row(layer, head, row)) {
            *s += a;
        }
    }
    scores
}

pub fn baseline_mask(trace: &AttentionTrace, cfg: &BaselineConfig) -> Result<EvictionMask> {
    cfg.validate()?;
    let n = trace.prompt_len();
    let budget = cfg.budget(n);
    if cfg.kind == BaselineKind::SinkWindow && cfg.sink_count >= budget {
        return Err(Error::Parameter(format!(
            "sink_count {} must be below the budget of {budget} positions",
            cfg.sink_count
        )));
    }
    let labels = trace.labels();
    let text: Vec<usize> = (0..n).filter(|&i| labels[i] == Modality::Text).collect();
    let visual: Vec<usize> = (0..n).filter(|&i| labels[i] == Modality::Visual).collect();
    let all: Vec<usize> = (0..n).collect();

    let mut mask = EvictionMask::empty(trace.header());
    for layer in 0..trace.num_layers() {
        for head in 0..trace.num_heads() {
            let kept: Vec<usize> = match cfg.kind {
                BaselineKind::RecentWindow => (n - budget..n).collect(),
                BaselineKind::SinkWindow => (0..cfg.sink_count)
                    .chain(n - (budget - cfg.sink_count)..n)
                    .collect(),
                BaselineKind::CumulativeTopK => {
                    let scores = cumulative_scores(trace, layer, head, cfg.observation_window);
                    select_top(&all, &scores, budget)
                }
                BaselineKind::FixedModalityPriority => {
                    let scores = cumulative_scores(trace, layer, head, cfg.observation_window);
                    let text_quota = (cfg.text_priority_frac * budget as f64).round() as usize;
                    let mut kept = select_top(&text, &scores, text_quota);
                    kept.extend(select_top(&visual, &scores, budget - kept.len()));
                    if kept.len() < budget {
                        let rest: Vec<usize> =
                            text.iter().copied().filter(|i| !kept.contains(i)).collect();
                        kept.extend(select_top(&rest, &scores, budget - kept.len()));
                    }
                    kept
                }
            };
            let keep = mask.keep_mut(layer, head);
            for i in kept {
                keep[i] = true;
            }
        }
    }
    Ok(mask)
}
