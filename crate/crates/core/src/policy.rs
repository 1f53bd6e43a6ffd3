//! Modality-adaptive eviction.
//!
//! Per head, proxy-token importance is split by modality into preference
//! weights `w_v`, `w_t`. Two quantities are derived from them:
//!
//! * the preference split of the layer budget `phi`: `phi_m = w_m / (w_v + w_t) * phi`;
//! * the modality need `k_m`: the fewest modality-`m` tokens whose importance
//!   reaches `theta * w_m`.
//!
//! Across layers a compensation term `K = sum_h (k_v + k_t - phi)` tracks how
//! far the heads of a layer overshoot (positive) or undershoot (negative) the
//! budget, and the next layer's budget becomes `phi - K / (L - l)` (or
//! `phi - K / (H * (L - l))` when the compensation is normalized per head).
//!
//! [`PolicyMode::Adaptive`] retains exactly the needs `k_v`, `k_t`;
//! [`PolicyMode::Proportional`] retains the integer preference split of
//! `round(phi)`. Proxy tokens are never evicted and are charged to the text
//! allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::FORMAT_VERSION;
use crate::importance::{compute_preference, compute_psi, PreferenceWeights, ProxyConfig};
use crate::mask::{select_top, EvictionMask};
use crate::trace::{AttentionTrace, Modality};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Adaptive,
    Proportional,
}

impl PolicyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyMode::Adaptive => "adaptive",
            PolicyMode::Proportional => "proportional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub budget_frac: f64,
    pub theta: f64,
    pub proxy: ProxyConfig,
    pub mode: PolicyMode,
    pub head_normalize_compensation: bool,
    pub min_keep_per_modality: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            budget_frac: 0.2,
            theta: 0.9,
            proxy: ProxyConfig::default(),
            mode: PolicyMode::Adaptive,
            head_normalize_compensation: true,
            min_keep_per_modality: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_frac > 0.0 && self.budget_frac <= 1.0) {
            return Err(Error::Parameter(format!(
                "budget_frac must lie in (0, 1], got {}",
                self.budget_frac
            )));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Parameter(format!(
                "theta must lie in (0, 1], got {}",
                self.theta
            )));
        }
        self.proxy.validate()
    }

    /// Initial per-head budget `round(budget_frac * n)`, at least 1.
    pub fn initial_budget(&self, n: usize) -> f64 {
        (self.budget_frac * n as f64).round().max(1.0)
    }

    fn budget_floor(&self) -> f64 {
        2.0 * self.min_keep_per_modality as f64
    }
}

/// Preference split of a layer budget.
///
/// When both weights are zero the budget is split by modality token counts
/// `(visual, text)`; when those are zero too, everything goes to text.
pub fn modality_budget_split(
    w: PreferenceWeights,
    phi_l: f64,
    token_counts: (usize, usize),
) -> (f64, f64) {
    let total = w.total();
    if total > 0.0 {
        let phi_v = w.w_v / total * phi_l;
        (phi_v, w.w_t / total * phi_l)
    } else {
        let (nv, nt) = token_counts;
        if nv + nt == 0 {
            (0.0, phi_l)
        } else {
            let phi_v = nv as f64 / (nv + nt) as f64 * phi_l;
            (phi_v, nt as f64 / (nv + nt) as f64 * phi_l)
        }
    }
}

/// Fewest tokens of one modality whose importance reaches `theta` of its total.
pub fn sparsity_need(values: &[f64], theta: f64) -> usize {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sorted.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    if theta >= 1.0 {
        return sorted.iter().filter(|&&v| v > 0.0).count();
    }
    // relative slack so a threshold that lands exactly on a prefix sum, such
    // as 0.8 of {0.5, 0.3, 0.2}, is not missed through rounding
    let target = theta * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        acc += v;
        if acc >= target {
            return i + 1;
        }
    }
    sorted.len()
}

/// Modality needs `(k_v, k_t)` for one head.
pub fn modality_sparsity_k(psi: &[f64], labels: &[Modality], theta: f64) -> (usize, usize) {
    let pick = |m: Modality| -> Vec<f64> {
        psi.iter()
            .zip(labels)
            .filter(|(_, &l)| l == m)
            .map(|(v, _)| *v)
            .collect()
    };
    (
        sparsity_need(&pick(Modality::Visual), theta),
        sparsity_need(&pick(Modality::Text), theta),
    )
}

/// Summed per-head deviation of retention from the layer budget.
pub fn layer_compensation(k_pairs: &[(usize, usize)], phi_l: f64) -> f64 {
    k_pairs
        .iter()
        .map(|&(kv, kt)| (kv + kt) as f64 - phi_l)
        .sum()
}

/// Next layer's budget after compensating layer `layer` (0-based).
///
/// `layer` must be below `num_layers - 1`; the last layer has no successor.
pub fn update_layer_budget(
    phi_l: f64,
    k_l: f64,
    layer: usize,
    num_layers: usize,
    num_heads: usize,
    head_normalize: bool,
    floor: f64,
) -> f64 {
    assert!(
        layer + 1 < num_layers,
        "no budget update after the last layer"
    );
    let remaining = (num_layers - layer - 1) as f64;
    let divisor = if head_normalize {
        num_heads as f64 * remaining
    } else {
        remaining
    };
    (phi_l - k_l / divisor).max(floor)
}

/// Budget decisions for one `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAllocation {
    pub w_v: f64,
    pub w_t: f64,
    pub need_visual: usize,
    pub need_text: usize,
    pub split_visual: f64,
    pub split_text: f64,
    /// Visual positions kept.
    pub visual: usize,
    /// Text-bucket positions kept; includes every proxy position.
    pub text: usize,
}

impl HeadAllocation {
    pub fn total(&self) -> usize {
        self.visual + self.text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub format_version: u32,
    pub mode: PolicyMode,
    pub num_layers: usize,
    pub num_heads: usize,
    pub proxy_positions: usize,
    /// Budget in force at each layer.
    pub phi: Vec<f64>,
    /// Compensation recorded at each layer.
    pub compensation: Vec<f64>,
    /// Compensation of the last layer.
    pub final_residual: f64,
    /// `[layer * H + head]`.
    pub heads: Vec<HeadAllocation>,
    pub warnings: Vec<String>,
}

impl BudgetPlan {
    pub fn head(&self, layer: usize, head: usize) -> &HeadAllocation {
        &self.heads[layer * self.num_heads + head]
    }

    pub fn total_retained(&self) -> usize {
        self.heads.iter().map(HeadAllocation::total).sum()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serialization is infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: BudgetPlan =
            serde_json::from_str(text).map_err(|e| Error::format("<plan>", e.to_string()))?;
        if plan.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {}", plan.format_version),
            ));
        }
        Ok(plan)
    }
}

/// Prompt positions of one head, partitioned for allocation.
struct Pools {
    proxies: Vec<usize>,
    proxy_labels: Vec<Modality>,
    text: Vec<usize>,
    visual: Vec<usize>,
}

impl Pools {
    fn new(trace: &AttentionTrace, proxy: &ProxyConfig) -> Self {
        let n = trace.prompt_len();
        let proxy_rows = proxy.rows(n);
        let mut pools = Pools {
            proxies: proxy_rows.clone().collect(),
            proxy_labels: trace.labels()[proxy_rows.clone()].to_vec(),
            text: Vec::new(),
            visual: Vec::new(),
        };
        for (i, m) in trace.labels().iter().enumerate().take(proxy_rows.start) {
            match m {
                Modality::Text => pools.text.push(i),
                Modality::Visual => pools.visual.push(i),
            }
        }
        pools
    }

    /// Most text-bucket positions that can be kept.
    fn text_capacity(&self) -> usize {
        self.proxies.len() + self.text.len()
    }
}

/// Plans per-layer budgets and per-head modality allocations.
pub fn plan_budgets(trace: &AttentionTrace, cfg: &PolicyConfig) -> Result<BudgetPlan> {
    Ok(plan_with_importance(trace, cfg)?.0)
}

/// Plans budgets and also returns the ψ vector of every head (`[l * H + h]`).
pub fn plan_with_importance(
    trace: &AttentionTrace,
    cfg: &PolicyConfig,
) -> Result<(BudgetPlan, Vec<Vec<f64>>)> {
    cfg.validate()?;
    let (l_count, h_count, n) = (trace.num_layers(), trace.num_heads(), trace.prompt_len());
    let labels = trace.labels();
    let pools = Pools::new(trace, &cfg.proxy);
    let counts = (
        trace.header().count(Modality::Visual),
        trace.header().count(Modality::Text),
    );

    let mut plan = BudgetPlan {
        format_version: FORMAT_VERSION,
        mode: cfg.mode,
        num_layers: l_count,
        num_heads: h_count,
        proxy_positions: pools.proxies.len(),
        phi: Vec::with_capacity(l_count),
        compensation: Vec::with_capacity(l_count),
        final_residual: 0.0,
        heads: Vec::with_capacity(l_count * h_count),
        warnings: Vec::new(),
    };
    let mut psis = Vec::with_capacity(l_count * h_count);
    let mut phi = cfg.initial_budget(n);

    for layer in 0..l_count {
        let mut retained_pairs = Vec::with_capacity(h_count);
        for head in 0..h_count {
            let psi = compute_psi(trace, layer, head, &cfg.proxy).psi;
            let w = compute_preference(&psi, labels);
            let (need_visual, need_text) = modality_sparsity_k(&psi, labels, cfg.theta);
            let (split_visual, split_text) = modality_budget_split(w, phi, counts);
            let mut alloc = HeadAllocation {
                w_v: w.w_v,
                w_t: w.w_t,
                need_visual,
                need_text,
                split_visual,
                split_text,
                visual: 0,
                text: 0,
            };
            let mut note = |msg: String| {
                plan.warnings
                    .push(format!("layer {layer} head {head}: {msg}"))
            };
            match cfg.mode {
                PolicyMode::Adaptive => {
                    let floor = cfg.min_keep_per_modality;
                    let (visual, text) = adaptive_allocation(
                        &psi,
                        &pools,
                        need_visual.max(floor),
                        need_text.max(floor),
                    );
                    alloc.visual = visual;
                    alloc.text = text;
                    retained_pairs.push((visual, text));
                }
                PolicyMode::Proportional => {
                    let (visual, text) =
                        proportional_allocation(w, phi, n, counts, &pools, cfg, &mut note);
                    alloc.visual = visual;
                    alloc.text = text;
                    retained_pairs.push((need_visual, need_text));
                }
            }
            plan.heads.push(alloc);
            psis.push(psi);
        }

        let k_l = layer_compensation(&retained_pairs, phi);
        plan.phi.push(phi);
        plan.compensation.push(k_l);
        if layer + 1 < l_count {
            let floor = cfg.budget_floor();
            let unclamped = update_layer_budget(
                phi,
                k_l,
                layer,
                l_count,
                h_count,
                cfg.head_normalize_compensation,
                f64::NEG_INFINITY,
            );
            if unclamped < floor {
                plan.warnings.push(format!(
                    "layer {}: budget {unclamped} clamped to floor {floor}",
                    layer + 1
                ));
            }
            phi = unclamped.max(floor);
        } else {
            plan.final_residual = k_l;
        }
    }
    Ok((plan, psis))
}

/// Positions kept when each modality retains its `want` top-ψ tokens plus
/// every proxy. Proxies already inside a modality's top set are not charged
/// twice.
fn adaptive_allocation(
    psi: &[f64],
    pools: &Pools,
    want_visual: usize,
    want_text: usize,
) -> (usize, usize) {
    let is_proxy = |i: &usize| *i >= pools.proxies.first().copied().unwrap_or(usize::MAX);
    let mut visual_all = pools.visual.clone();
    let mut text_all = pools.text.clone();
    for &p in &pools.proxies {
        if pools.proxy_labels[p - pools.proxies[0]] == Modality::Visual {
            visual_all.push(p);
        } else {
            text_all.push(p);
        }
    }
    let fresh = |pool: &[usize], want: usize| {
        select_top(pool, psi, want)
            .iter()
            .filter(|i| !is_proxy(i))
            .count()
    };
    (
        fresh(&visual_all, want_visual),
        pools.proxies.len() + fresh(&text_all, want_text),
    )
}

/// Integer split of `round(phi)` by preference weight, using largest remainders.
fn proportional_allocation(
    w: PreferenceWeights,
    phi: f64,
    n: usize,
    counts: (usize, usize),
    pools: &Pools,
    cfg: &PolicyConfig,
    note: &mut impl FnMut(String),
) -> (usize, usize) {
    let total = (phi.round().max(0.0) as usize).min(n);
    let (quota_v, quota_t) = modality_budget_split(w, total as f64, counts);
    let (mut visual, mut text) = largest_remainder(quota_v, quota_t, total);

    let floor = cfg.min_keep_per_modality;
    if visual < floor || text < floor {
        visual = visual.max(floor);
        text = text.max(floor);
    }
    // proxies come out of the text share; any overflow comes out of visual
    if text < pools.proxies.len() {
        let extra = pools.proxies.len() - text;
        text = pools.proxies.len();
        visual = visual.saturating_sub(extra);
    }
    let (vis_cap, text_cap) = (pools.visual.len(), pools.text_capacity());
    if visual > vis_cap {
        note(format!(
            "visual allocation {visual} exceeds {vis_cap} tokens; spilling to text"
        ));
        text += visual - vis_cap;
        visual = vis_cap;
    }
    if text > text_cap {
        note(format!(
            "text allocation {text} exceeds {text_cap} tokens; spilling to visual"
        ));
        visual = (visual + text - text_cap).min(vis_cap);
        text = text_cap;
    }
    if visual + text != total {
        note(format!(
            "kept {} positions for a budget of {total}",
            visual + text
        ));
    }
    (visual, text)
}

/// Rounds two non-negative quotas summing to `total` into integers summing to
/// `total`. Equal remainders favour text.
pub fn largest_remainder(quota_v: f64, quota_t: f64, total: usize) -> (usize, usize) {
    let (fv, ft) = (quota_v.max(0.0).floor(), quota_t.max(0.0).floor());
    let (mut v, mut t) = (fv as usize, ft as usize);
    let mut left = total.saturating_sub(v + t);
    let (rv, rt) = (quota_v - fv, quota_t - ft);
    let order: [bool; 2] = if rv > rt {
        [true, false]
    } else {
        [false, true]
    };
    let mut i = 0;
    while left > 0 {
        if order[i % 2] {
            v += 1;
        } else {
            t += 1;
        }
        left -= 1;
        i += 1;
    }
    while v + t > total {
        if t > 0 && (rt <= rv || v == 0) {
            t -= 1;
        } else {
            v -= 1;
        }
    }
    (v, t)
}

/// Applies a plan: per head, keep the proxies plus the top-ψ tokens of each modality.
pub fn build_masks(
    trace: &AttentionTrace,
    plan: &BudgetPlan,
    cfg: &PolicyConfig,
) -> Result<EvictionMask> {
    let psis: Vec<Vec<f64>> = (0..trace.num_layers())
        .flat_map(|l| (0..trace.num_heads()).map(move |h| (l, h)))
        .map(|(l, h)| compute_psi(trace, l, h, &cfg.proxy).psi)
        .collect();
    masks_from_importance(trace, plan, cfg, &psis)
}

pub(crate) fn masks_from_importance(
    trace: &AttentionTrace,
    plan: &BudgetPlan,
    cfg: &PolicyConfig,
    psis: &[Vec<f64>],
) -> Result<EvictionMask> {
    if plan.num_layers != trace.num_layers()
        || plan.num_heads != trace.num_heads()
        || plan.heads.len() != plan.num_layers * plan.num_heads
    {
        return Err(Error::Shape(format!(
            "plan covers {}x{} heads, trace has {}x{}",
            plan.num_layers,
            plan.num_heads,
            trace.num_layers(),
            trace.num_heads()
        )));
    }
    let pools = Pools::new(trace, &cfg.proxy);
    let mut mask = EvictionMask::empty(trace.header());
    for layer in 0..trace.num_layers() {
        for head in 0..trace.num_heads() {
            let alloc = plan.head(layer, head);
            let psi = &psis[layer * trace.num_heads() + head];
            let keep = mask.keep_mut(layer, head);
            for &p in &pools.proxies {
                keep[p] = true;
            }
            let text_slots = alloc.text.saturating_sub(pools.proxies.len());
            for (pool, want, name) in [
                (&pools.text, text_slots, "text"),
                (&pools.visual, alloc.visual, "visual"),
            ] {
                if want > pool.len() {
                    mask.warnings.push(format!(
                        "layer {layer} head {head}: {name} allocation {want} clamped to {}",
                        pool.len()
                    ));
                }
                let keep = mask.keep_mut(layer, head);
                for i in select_top(pool, psi, want) {
                    keep[i] = true;
                }
            }
        }
    }
    Ok(mask)
}

/// Plans and masks in one pass.
pub fn madakv_mask(
    trace: &AttentionTrace,
    cfg: &PolicyConfig,
) -> Result<(BudgetPlan, EvictionMask)> {
    let (plan, psis) = plan_with_importance(trace, cfg)?;
    let mut mask = masks_from_importance(trace, &plan, cfg, &psis)?;
    let mut warnings = plan.warnings.clone();
    warnings.append(&mut mask.warnings);
    mask.warnings = warnings;
    Ok((plan, mask))
}
