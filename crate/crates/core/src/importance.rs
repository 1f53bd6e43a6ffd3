//! Proxy-token importance, per-head modality preference, and the descriptive
//! sparsity/preference statistics computed over a trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, Modality};

/// Number of tokens taken from the end of the prompt as proxies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub proxy_count: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { proxy_count: 8 }
    }
}

impl ProxyConfig {
    pub fn new(proxy_count: usize) -> Result<Self> {
        let cfg = ProxyConfig { proxy_count };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.proxy_count == 0 {
            return Err(Error::Parameter("proxy_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Proxy rows for a prompt of length `n`: the last `min(p, n)` positions.
    pub fn rows(&self, n: usize) -> std::ops::Range<usize> {
        n - self.proxy_count.min(n)..n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub layer: usize,
    pub head: usize,
    pub psi: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PreferenceWeights {
    pub w_v: f64,
    pub w_t: f64,
}

impl PreferenceWeights {
    pub fn total(&self) -> f64 {
        self.w_v + self.w_t
    }

    pub fn get(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Text => self.w_t,
            Modality::Visual => self.w_v,
        }
    }
}

/// Importance of each prompt token: the attention it receives from the proxy rows.
pub fn compute_psi(
    trace: &AttentionTrace,
    layer: usize,
    head: usize,
    cfg: &ProxyConfig,
) -> ImportanceVector {
    let n = trace.prompt_len();
    let mut psi = vec![0.0; n];
    for row in cfg.rows(n) {
        for (acc, &a) in psi.iter_mut().zip(trace.prefill_row(layer, head, row)) {
            *acc += a;
        }
    }
    ImportanceVector { layer, head, psi }
}

/// Modality-wise sums of `psi`.
pub fn compute_preference(psi: &[f64], labels: &[Modality]) -> PreferenceWeights {
    assert_eq!(
        psi.len(),
        labels.len(),
        "psi and labels must have equal length"
    );
    let mut w = PreferenceWeights::default();
    for (&p, &m) in psi.iter().zip(labels) {
        match m {
            Modality::Text => w.w_t += p,
            Modality::Visual => w.w_v += p,
        }
    }
    w
}

/// Share of all prefill attention mass at `(layer, head)` that lands on text positions.
pub fn head_modality_share(trace: &AttentionTrace, layer: usize, head: usize) -> f64 {
    let labels = trace.labels();
    let (mut text, mut total) = (0.0, 0.0);
    for row in 0..trace.prompt_len() {
        for (j, &a) in trace.prefill_row(layer, head, row).iter().enumerate() {
            total += a;
            if labels[j] == Modality::Text {
                text += a;
            }
        }
    }
    if total > 0.0 {
        text / total
    } else {
        1.0
    }
}

/// Token group a sparsity row refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TokenGroup {
    All,
    Only(Modality),
}

impl TokenGroup {
    pub const ALL: [TokenGroup; 3] = [
        TokenGroup::All,
        TokenGroup::Only(Modality::Text),
        TokenGroup::Only(Modality::Visual),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TokenGroup::All => "all",
            TokenGroup::Only(m) => m.as_str(),
        }
    }

    fn contains(self, m: Modality) -> bool {
        match self {
            TokenGroup::All => true,
            TokenGroup::Only(g) => g == m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityPoint {
    pub group: TokenGroup,
    pub budget_frac: f64,
    pub token_count: usize,
    pub kept: usize,
    pub retained_share: f64,
}

/// ψ averaged over every `(layer, head)`, accumulated in a fixed order.
pub fn aggregated_psi(trace: &AttentionTrace, cfg: &ProxyConfig) -> Vec<f64> {
    let n = trace.prompt_len();
    let heads = (trace.num_layers() * trace.num_heads()) as f64;
    let mut agg = vec![0.0; n];
    for layer in 0..trace.num_layers() {
        for head in 0..trace.num_heads() {
            let psi = compute_psi(trace, layer, head, cfg).psi;
            for (a, p) in agg.iter_mut().zip(psi) {
                *a += p;
            }
        }
    }
    agg.iter_mut().for_each(|a| *a /= heads);
    agg
}

/// Number of tokens a budget fraction keeps out of `count`: `ceil(f * count)`.
pub fn budget_count(frac: f64, count: usize) -> usize {
    // absorb representation error such as 0.7 * 10 = 7.000000000000001
    ((frac * count as f64 - 1e-9).ceil().max(0.0) as usize).min(count)
}

/// For each budget fraction and token group, the share of the group's
/// aggregated importance captured by its top `ceil(f * count)` tokens.
/// Groups with no tokens are omitted.
pub fn sparsity_curve(
    trace: &AttentionTrace,
    budget_fracs: &[f64],
    cfg: &ProxyConfig,
) -> Result<Vec<SparsityPoint>> {
    if let Some(f) = budget_fracs.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Parameter(format!(
            "budget fractions must lie in (0, 1], got {f}"
        )));
    }
    let agg = aggregated_psi(trace, cfg);
    let labels = trace.labels();
    let mut out = Vec::new();
    for group in TokenGroup::ALL {
        let mut values: Vec<f64> = agg
            .iter()
            .zip(labels)
            .filter(|(_, m)| group.contains(**m))
            .map(|(v, _)| *v)
            .collect();
        if values.is_empty() {
            continue;
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let prefix = compensated_prefix_sums(&values);
        let total = *prefix.last().unwrap();
        for &f in budget_fracs {
            let kept = budget_count(f, values.len());
            let captured = if kept == 0 { 0.0 } else { prefix[kept - 1] };
            let retained_share = if total > 0.0 { captured / total } else { 1.0 };
            out.push(SparsityPoint {
                group,
                budget_frac: f,
                token_count: values.len(),
                kept,
                retained_share: retained_share.min(1.0),
            });
        }
    }
    Ok(out)
}

/// Running sums with Neumaier compensation, so a share such as 2 of 10
/// equal values comes out as exactly 0.2.
fn compensated_prefix_sums(values: &[f64]) -> Vec<f64> {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    values
        .iter()
        .map(|&v| {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
            sum + comp
        })
        .collect()
}
