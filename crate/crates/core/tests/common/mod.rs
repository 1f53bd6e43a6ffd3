#![allow(dead_code)]

use kvsim_core::{AttentionTrace, Modality, TraceHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random causal row-stochastic row of `len` entries. With `discrete` the
/// raw weights come from {0, 1, 2, 3}, which produces many exact ties.
pub fn random_row(rng: &mut impl Rng, len: usize, discrete: bool) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|_| {
            if discrete {
                rng.gen_range(0..4) as f64
            } else {
                rng.gen::<f64>() + 1e-3
            }
        })
        .collect();
    if row.iter().all(|v| *v == 0.0) {
        row[len - 1] = 1.0;
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= total);
    row
}

pub fn random_labels(rng: &mut impl Rng, n: usize) -> Vec<Modality> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                Modality::Visual
            } else {
                Modality::Text
            }
        })
        .collect()
}

pub fn random_trace_with_labels(
    rng: &mut impl Rng,
    num_layers: usize,
    num_heads: usize,
    labels: Vec<Modality>,
    steps: usize,
    discrete: bool,
) -> AttentionTrace {
    let n = labels.len();
    let prefill = (0..num_layers)
        .map(|_| {
            (0..num_heads)
                .map(|_| {
                    (0..n)
                        .flat_map(|i| random_row(rng, i + 1, discrete))
                        .collect()
                })
                .collect()
        })
        .collect();
    let decode = (1..=steps)
        .map(|t| {
            (0..num_layers)
                .map(|_| {
                    (0..num_heads)
                        .map(|_| random_row(rng, n + t - 1, discrete))
                        .collect()
                })
                .collect()
        })
        .collect();
    let header = TraceHeader {
        num_layers,
        num_heads,
        prompt_len: n,
        num_decode_steps: steps,
        modality_labels: labels,
    };
    AttentionTrace::new(header, prefill, decode).expect("generated trace is valid")
}

pub fn random_trace(
    seed: u64,
    num_layers: usize,
    num_heads: usize,
    n: usize,
    steps: usize,
    discrete: bool,
) -> AttentionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = random_labels(&mut rng, n);
    random_trace_with_labels(&mut rng, num_layers, num_heads, labels, steps, discrete)
}
