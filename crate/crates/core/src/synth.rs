//! Synthetic attention traces.
//!
//! Each `(layer, head)` assigns every key position a fixed salience drawn
//! from a Zipf law: within each modality the positions are randomly permuted
//! and the token at rank `r` gets weight `r^-skew`. Every query row then
//! routes a fixed share of its mass to visual positions (the head's
//! preference bias) and spreads each modality's share proportionally to the
//! salience of the visible positions of that modality. When a row sees only
//! one modality, that modality receives the whole row.
//!
//! Tokens produced during decode are labelled text for the purpose of the
//! split and get a salience drawn from the same Zipf law.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, Modality, TraceHeader};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub prompt_len: usize,
    pub num_decode_steps: usize,
    /// Zipf exponent of per-modality key salience.
    pub skew: f64,
    /// Fraction of prompt positions labelled visual.
    pub modality_mix: f64,
    /// Per-head share of each row's mass routed to visual positions.
    pub head_preference_bias: Vec<f64>,
    pub seed: u64,
}

impl SyntheticTraceSpec {
    /// A spec where every head uses the same preference bias.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform_bias(
        num_layers: usize,
        num_heads: usize,
        prompt_len: usize,
        num_decode_steps: usize,
        skew: f64,
        modality_mix: f64,
        bias: f64,
        seed: u64,
    ) -> Self {
        SyntheticTraceSpec {
            num_layers,
            num_heads,
            prompt_len,
            num_decode_steps,
            skew,
            modality_mix,
            head_preference_bias: vec![bias; num_heads],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.prompt_len == 0 {
            return Err(Error::Parameter(format!(
                "L, H and n must be positive (got L={}, H={}, n={})",
                self.num_layers, self.num_heads, self.prompt_len
            )));
        }
        if !(self.skew > 0.0 && self.skew.is_finite()) {
            return Err(Error::Parameter(format!(
                "skew must be a positive finite number, got {}",
                self.skew
            )));
        }
        if !(0.0..=1.0).contains(&self.modality_mix) {
            return Err(Error::Parameter(format!(
                "modality_mix must lie in [0, 1], got {}",
                self.modality_mix
            )));
        }
        if self.head_preference_bias.len() != self.num_heads {
            return Err(Error::Parameter(format!(
                "head_preference_bias has {} entries, expected H = {}",
                self.head_preference_bias.len(),
                self.num_heads
            )));
        }
        if let Some(b) = self
            .head_preference_bias
            .iter()
            .find(|b| !(0.0..=1.0).contains(*b))
        {
            return Err(Error::Parameter(format!(
                "head_preference_bias entries must lie in [0, 1], got {b}"
            )));
        }
        Ok(())
    }
}

/// `count` specs derived from `base`. Spec `i` uses seed `base.seed + i` and
/// draws each head's preference bias uniformly from `bias_choices`.
pub fn heterogeneous_suite(
    base: &SyntheticTraceSpec,
    bias_choices: &[f64],
    count: usize,
) -> Result<Vec<SyntheticTraceSpec>> {
    if bias_choices.is_empty() {
        return Err(Error::Parameter("bias_choices must not be empty".into()));
    }
    (0..count as u64)
        .map(|i| {
            let seed = base.seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // streams 0.. are taken by the generator itself
            rng.set_stream(u64::MAX);
            let spec = SyntheticTraceSpec {
                seed,
                head_preference_bias: (0..base.num_heads)
                    .map(|_| *bias_choices.choose(&mut rng).unwrap())
                    .collect(),
                ..base.clone()
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// Generates a trace; a pure function of `spec` (seed included).
pub fn generate_synthetic(spec: &SyntheticTraceSpec) -> Result<AttentionTrace> {
    spec.validate()?;
    let n = spec.prompt_len;
    let steps = spec.num_decode_steps;
    let labels = layout_labels(spec);
    let text_positions: Vec<usize> = (0..n).filter(|&i| labels[i] == Modality::Text).collect();
    let visual_positions: Vec<usize> = (0..n).filter(|&i| labels[i] == Modality::Visual).collect();

    let heads = spec.num_layers * spec.num_heads;
    let mut prefill = Vec::with_capacity(heads);
    let mut decode_by_head = Vec::with_capacity(heads);
    for layer in 0..spec.num_layers {
        for head in 0..spec.num_heads {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(1 + (layer * spec.num_heads + head) as u64);

            let mut salience = vec![0.0; n + steps];
            for positions in [&text_positions, &visual_positions] {
                let mut ranks: Vec<usize> = (1..=positions.len()).collect();
                ranks.shuffle(&mut rng);
                for (&pos, &rank) in positions.iter().zip(&ranks) {
                    salience[pos] = zipf_weight(rank, spec.skew);
                }
            }
            for s in salience.iter_mut().skip(n) {
                *s = zipf_weight(rng.gen_range(1..=n + steps), spec.skew);
            }

            let bias = spec.head_preference_bias[head];
            let is_visual = |j: usize| j < n && labels[j] == Modality::Visual;
            let mut builder = RowBuilder {
                salience: &salience,
                bias,
                sums: [0.0; 2],
            };

            let mut tri = Vec::with_capacity(n * (n + 1) / 2);
            for i in 0..n {
                builder.admit(i, is_visual(i));
                builder.emit(i + 1, &is_visual, &mut tri);
            }
            let mut rows = Vec::with_capacity(steps);
            for step in 1..=steps {
                // positions 0..n+step-1; decode token n+step-2 becomes visible
                if step >= 2 {
                    builder.admit(n + step - 2, false);
                }
                let mut row = Vec::with_capacity(n + step - 1);
                builder.emit(n + step - 1, &is_visual, &mut row);
                rows.push(row);
            }
            prefill.push(tri);
            decode_by_head.push(rows);
        }
    }

    let mut decode = Vec::with_capacity(steps * heads);
    for step in 0..steps {
        for rows in decode_by_head.iter_mut() {
            decode.push(std::mem::take(&mut rows[step]));
        }
    }

    let header = TraceHeader {
        num_layers: spec.num_layers,
        num_heads: spec.num_heads,
        prompt_len: n,
        num_decode_steps: steps,
        modality_labels: labels,
    };
    Ok(AttentionTrace::from_parts_unchecked(
        header, prefill, decode,
    ))
}

/// Causal uniform attention: row `i` puts `1 / (i + 1)` on every visible position.
pub fn uniform_trace(
    num_layers: usize,
    num_heads: usize,
    labels: Vec<Modality>,
    num_decode_steps: usize,
) -> Result<AttentionTrace> {
    let n = labels.len();
    let header = TraceHeader {
        num_layers,
        num_heads,
        prompt_len: n,
        num_decode_steps,
        modality_labels: labels,
    };
    header.validate()?;
    let tri: Vec<f64> = (0..n)
        .flat_map(|i| std::iter::repeat_n(1.0 / (i + 1) as f64, i + 1))
        .collect();
    let heads = num_layers * num_heads;
    let prefill = vec![tri; heads];
    let mut decode = Vec::with_capacity(num_decode_steps * heads);
    for step in 1..=num_decode_steps {
        let len = n + step - 1;
        for _ in 0..heads {
            decode.push(vec![1.0 / len as f64; len]);
        }
    }
    Ok(AttentionTrace::from_parts_unchecked(
        header, prefill, decode,
    ))
}

fn zipf_weight(rank: usize, skew: f64) -> f64 {
    (rank as f64).powf(-skew)
}

/// Exactly `round(mix * n)` visual positions, placed by a seeded shuffle.
fn layout_labels(spec: &SyntheticTraceSpec) -> Vec<Modality> {
    let n = spec.prompt_len;
    let visual = ((spec.modality_mix * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let mut labels = vec![Modality::Text; n];
    for &pos in &order[..visual] {
        labels[pos] = Modality::Visual;
    }
    labels
}

struct RowBuilder<'a> {
    salience: &'a [f64],
    bias: f64,
    /// Running salience totals of visible positions: `[text, visual]`.
    sums: [f64; 2],
}

impl RowBuilder<'_> {
    fn admit(&mut self, pos: usize, visual: bool) {
        self.sums[visual as usize] += self.salience[pos];
    }

    fn emit(&self, len: usize, is_visual: &impl Fn(usize) -> bool, out: &mut Vec<f64>) {
        let [text_sum, visual_sum] = self.sums;
        let visual_share = match (text_sum > 0.0, visual_sum > 0.0) {
            (true, true) => self.bias,
            (false, true) => 1.0,
            _ => 0.0,
        };
        let text_scale = if text_sum > 0.0 {
            (1.0 - visual_share) / text_sum
        } else {
            0.0
        };
        let visual_scale = if visual_sum > 0.0 {
            visual_share / visual_sum
        } else {
            0.0
        };
        out.extend((0..len).map(|j| {
            let scale = if is_visual(j) {
                visual_scale
            } else {
                text_scale
            };
            self.salience[j] * scale
        }));
    }
}
