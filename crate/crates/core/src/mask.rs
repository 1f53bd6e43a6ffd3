//! Per-(layer, head) keep/evict decisions over prompt positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::FORMAT_VERSION;
use crate::trace::{AttentionTrace, TraceHeader};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionMask {
    num_layers: usize,
    num_heads: usize,
    prompt_len: usize,
    keep: Vec<Vec<bool>>,
    pub warnings: Vec<String>,
}

impl EvictionMask {
    /// A mask that evicts every prompt position.
    pub fn empty(header: &TraceHeader) -> Self {
        Self::filled(header, false)
    }

    pub fn keep_all(header: &TraceHeader) -> Self {
        Self::filled(header, true)
    }

    fn filled(header: &TraceHeader, value: bool) -> Self {
        EvictionMask {
            num_layers: header.num_layers,
            num_heads: header.num_heads,
            prompt_len: header.prompt_len,
            keep: vec![vec![value; header.prompt_len]; header.num_layers * header.num_heads],
            warnings: Vec::new(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn keep(&self, layer: usize, head: usize) -> &[bool] {
        &self.keep[layer * self.num_heads + head]
    }

    pub fn keep_mut(&mut self, layer: usize, head: usize) -> &mut [bool] {
        &mut self.keep[layer * self.num_heads + head]
    }

    /// Kept prompt positions at `(layer, head)` in ascending order.
    pub fn kept_positions(&self, layer: usize, head: usize) -> Vec<usize> {
        self.keep(layer, head)
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn kept_count(&self, layer: usize, head: usize) -> usize {
        self.keep(layer, head).iter().filter(|&&k| k).count()
    }

    /// `[layer][head]` kept counts.
    pub fn kept_counts(&self) -> Vec<Vec<usize>> {
        (0..self.num_layers)
            .map(|l| (0..self.num_heads).map(|h| self.kept_count(l, h)).collect())
            .collect()
    }

    pub fn total_kept(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| k).count()
    }

    pub fn check_shape(&self, trace: &AttentionTrace) -> Result<()> {
        if self.num_layers != trace.num_layers()
            || self.num_heads != trace.num_heads()
            || self.prompt_len != trace.prompt_len()
        {
            return Err(Error::Shape(format!(
                "mask is {}x{}x{}, trace is {}x{}x{}",
                self.num_layers,
                self.num_heads,
                self.prompt_len,
                trace.num_layers(),
                trace.num_heads(),
                trace.prompt_len()
            )));
        }
        Ok(())
    }

    /// Canonical text form: one `0`/`1` string per `(layer, head)`.
    pub fn to_json(&self) -> String {
        let doc = MaskDoc {
            format_version: FORMAT_VERSION,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            prompt_len: self.prompt_len,
            keep: (0..self.num_layers)
                .map(|l| {
                    (0..self.num_heads)
                        .map(|h| {
                            self.keep(l, h)
                                .iter()
                                .map(|&k| if k { '1' } else { '0' })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            warnings: self.warnings.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("mask serialization is infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MaskDoc =
            serde_json::from_str(text).map_err(|e| Error::format("<mask>", e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {}", doc.format_version),
            ));
        }
        let mut keep = Vec::with_capacity(doc.num_layers * doc.num_heads);
        if doc.keep.len() != doc.num_layers {
            return Err(Error::format(
                "keep",
                format!("expected {} layers", doc.num_layers),
            ));
        }
        for (l, layer) in doc.keep.iter().enumerate() {
            if layer.len() != doc.num_heads {
                return Err(Error::format(
                    format!("keep[{l}]"),
                    format!("expected {} heads", doc.num_heads),
                ));
            }
            for (h, bits) in layer.iter().enumerate() {
                let row: Vec<bool> = bits
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(Error::format(
                            format!("keep[{l}][{h}]"),
                            "expected 0/1 digits",
                        )),
                    })
                    .collect::<Result<_>>()?;
                if row.len() != doc.prompt_len {
                    return Err(Error::format(
                        format!("keep[{l}][{h}]"),
                        format!("expected {} positions", doc.prompt_len),
                    ));
                }
                keep.push(row);
            }
        }
        Ok(EvictionMask {
            num_layers: doc.num_layers,
            num_heads: doc.num_heads,
            prompt_len: doc.prompt_len,
            keep,
            warnings: doc.warnings,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskDoc {
    format_version: u32,
    num_layers: usize,
    num_heads: usize,
    prompt_len: usize,
    keep: Vec<Vec<String>>,
    warnings: Vec<String>,
}

/// The `k` highest-scoring `candidates`; equal scores prefer the later position.
pub fn select_top(candidates: &[usize], scores: &[f64], k: usize) -> Vec<usize> {
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    ranked.truncate(k);
    ranked
}
