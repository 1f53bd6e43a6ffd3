//! Attention trace data model.
//!
//! A trace holds post-softmax attention weights recorded (or synthesized) for
//! one prompt: a causal `n x n` matrix per `(layer, head)` for the prefill
//! pass, and one probability vector per decode step and `(layer, head)`.
//! Decode step `t` (1-based) attends over `n + t - 1` positions.
//!
//! Prefill matrices are stored as packed lower triangles, so causality holds
//! by construction and row `i` is a slice of length `i + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of every attention row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Text, Modality::Visual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub num_layers: usize,
    pub num_heads: usize,
    pub prompt_len: usize,
    pub num_decode_steps: usize,
    pub modality_labels: Vec<Modality>,
}

impl TraceHeader {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Validation(
                "num_layers (L) must be at least 1".into(),
            ));
        }
        if self.num_heads == 0 {
            return Err(Error::Validation("num_heads (H) must be at least 1".into()));
        }
        if self.prompt_len == 0 {
            return Err(Error::Validation(
                "prompt_len (n) must be at least 1".into(),
            ));
        }
        if self.modality_labels.len() != self.prompt_len {
            return Err(Error::Validation(format!(
                "modality_labels has length {}, expected n = {}",
                self.modality_labels.len(),
                self.prompt_len
            )));
        }
        Ok(())
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.modality_labels
            .iter()
            .filter(|&&m| m == modality)
            .count()
    }

    /// Length of the attention vector at 1-based decode step `step`.
    pub fn decode_len(&self, step: usize) -> usize {
        self.prompt_len + step - 1
    }

    pub(crate) fn triangle_len(&self) -> usize {
        self.prompt_len * (self.prompt_len + 1) / 2
    }
}

/// Recorded attention for one prompt. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    header: TraceHeader,
    /// `[layer * H + head]` -> packed lower triangle, row-major.
    prefill: Vec<Vec<f64>>,
    /// `[(step - 1) * L * H + layer * H + head]` -> vector of length `n + step - 1`.
    decode: Vec<Vec<f64>>,
}

impl AttentionTrace {
    /// Builds a trace from packed storage and checks every invariant.
    ///
    /// `prefill` is indexed `[layer][head]` and holds packed lower triangles;
    /// `decode` is indexed `[step][layer][head]`.
    pub fn new(
        header: TraceHeader,
        prefill: Vec<Vec<Vec<f64>>>,
        decode: Vec<Vec<Vec<Vec<f64>>>>,
    ) -> Result<Self> {
        header.validate()?;
        let (l_count, h_count) = (header.num_layers, header.num_heads);
        if prefill.len() != l_count || prefill.iter().any(|p| p.len() != h_count) {
            return Err(Error::Validation(format!(
                "prefill must be indexed [{l_count}][{h_count}]"
            )));
        }
        if decode.len() != header.num_decode_steps
            || decode
                .iter()
                .any(|s| s.len() != l_count || s.iter().any(|p| p.len() != h_count))
        {
            return Err(Error::Validation(format!(
                "decode must be indexed [{}][{l_count}][{h_count}]",
                header.num_decode_steps
            )));
        }
        let prefill = prefill.into_iter().flatten().collect();
        let decode = decode.into_iter().flatten().flatten().collect();
        let trace = AttentionTrace {
            header,
            prefill,
            decode,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// Construction path for generators that already guarantee the invariants.
    pub(crate) fn from_parts_unchecked(
        header: TraceHeader,
        prefill: Vec<Vec<f64>>,
        decode: Vec<Vec<f64>>,
    ) -> Self {
        AttentionTrace {
            header,
            prefill,
            decode,
        }
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn labels(&self) -> &[Modality] {
        &self.header.modality_labels
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.header.num_heads
    }

    pub fn prompt_len(&self) -> usize {
        self.header.prompt_len
    }

    pub fn num_decode_steps(&self) -> usize {
        self.header.num_decode_steps
    }

    fn head_index(&self, layer: usize, head: usize) -> usize {
        assert!(
            layer < self.header.num_layers && head < self.header.num_heads,
            "(layer {layer}, head {head}) out of range"
        );
        layer * self.header.num_heads + head
    }

    /// Packed lower triangle of the prefill matrix for `(layer, head)`.
    pub fn prefill_triangle(&self, layer: usize, head: usize) -> &[f64] {
        &self.prefill[self.head_index(layer, head)]
    }

    /// Prefill row `row` for `(layer, head)`; its length is `row + 1`.
    pub fn prefill_row(&self, layer: usize, head: usize, row: usize) -> &[f64] {
        let start = row * (row + 1) / 2;
        &self.prefill_triangle(layer, head)[start..start + row + 1]
    }

    /// Full-matrix view of a prefill entry; causally masked entries read as 0.
    pub fn prefill_entry(&self, layer: usize, head: usize, row: usize, col: usize) -> f64 {
        if col > row {
            0.0
        } else {
            self.prefill_row(layer, head, row)[col]
        }
    }

    /// Decode attention at 1-based `step` for `(layer, head)`.
    pub fn decode_row(&self, step: usize, layer: usize, head: usize) -> &[f64] {
        assert!(
            step >= 1 && step <= self.header.num_decode_steps,
            "decode step {step} out of range"
        );
        let per_step = self.header.num_layers * self.header.num_heads;
        &self.decode[(step - 1) * per_step + self.head_index(layer, head)]
    }

    /// Checks row-stochasticity, non-negativity and storage lengths.
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let h = &self.header;
        let n = h.prompt_len;
        for layer in 0..h.num_layers {
            for head in 0..h.num_heads {
                let tri = &self.prefill[layer * h.num_heads + head];
                if tri.len() != h.triangle_len() {
                    return Err(Error::Validation(format!(
                        "prefill triangle at ({layer},{head}) has {} entries, expected {}",
                        tri.len(),
                        h.triangle_len()
                    )));
                }
                for row in 0..n {
                    let start = row * (row + 1) / 2;
                    check_row(&tri[start..start + row + 1], || {
                        format!("({layer},{head},{row})")
                    })?;
                }
            }
        }
        for step in 1..=h.num_decode_steps {
            for layer in 0..h.num_layers {
                for head in 0..h.num_heads {
                    let idx = (step - 1) * h.num_layers * h.num_heads + layer * h.num_heads + head;
                    let row = &self.decode[idx];
                    if row.len() != h.decode_len(step) {
                        return Err(Error::Validation(format!(
                            "decode vector at step {step} ({layer},{head}) has length {}, expected {}",
                            row.len(),
                            h.decode_len(step)
                        )));
                    }
                    check_row(row, || format!("decode step {step} ({layer},{head})"))?;
                }
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of every stored bit. Used to assert that
    /// consumers never mutate a trace.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let h = &self.header;
        for v in [h.num_layers, h.num_heads, h.prompt_len, h.num_decode_steps] {
            feed(v as u64);
        }
        for m in &h.modality_labels {
            feed(*m as u64);
        }
        for v in self.prefill.iter().chain(self.decode.iter()).flatten() {
            feed(v.to_bits());
        }
        hash
    }
}

fn check_row(row: &[f64], at: impl Fn() -> String) -> Result<()> {
    if let Some(col) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!(
            "entry {} at column {col} of row {} is negative or not finite",
            row[col],
            at()
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::Validation(format!("row sum {sum} at {}", at())));
    }
    Ok(())
}
