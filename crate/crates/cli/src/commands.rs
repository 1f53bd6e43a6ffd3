//! Command implementations. Each writes its outputs atomically into the
//! configured output directory next to `effective_config.json`, and returns
//! a short summary for stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kvsim_core::format::{encode_binary, encode_text, write_atomic};
use kvsim_core::importance::{sparsity_curve, ProxyConfig};
use kvsim_core::report::{
    comparison_table, head_share_table, memory_anchor_table, series_table, sort_compare_rows,
    sparsity_table, CompareRow, Table, REFERENCE_MEMORY_GIB,
};
use kvsim_core::sim::{replay_with, run_policy, SimOptions, SimReport};
use kvsim_core::{
    generate_synthetic, heterogeneous_suite, load_trace, madakv_mask, AttentionTrace,
    BaselineConfig, BaselineKind, Modality, PolicySpec,
};
use rayon::prelude::*;

use crate::config::{CommandKind, RunConfig};
use crate::CliError;

pub fn execute(cfg: &RunConfig) -> Result<String, CliError> {
    prepare_out(cfg)?;
    match cfg.command {
        CommandKind::Generate => cmd_generate(cfg),
        CommandKind::Analyze => cmd_analyze(cfg),
        CommandKind::Run => cmd_run(cfg),
        CommandKind::Compare => cmd_compare(cfg),
        CommandKind::Sweep => cmd_sweep(cfg),
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            cfg.out.display()
        ))
    })?;
    write_output(
        &cfg.out.join("effective_config.json"),
        cfg.to_json().as_bytes(),
    )
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Config(format!("cannot write output: {e}")))
}

fn write_table(cfg: &RunConfig, stem: &str, table: &Table) -> Result<PathBuf, CliError> {
    let path = cfg.out.join(format!("{stem}.{}", cfg.format.extension()));
    write_output(&path, table.render(cfg.format).as_bytes())?;
    Ok(path)
}

fn load(path: &Path) -> Result<AttentionTrace, CliError> {
    load_trace(path).map_err(|e| CliError::Data(e.to_string()))
}

fn trace_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<String, CliError> {
    let spec = cfg
        .synthetic
        .as_ref()
        .expect("generate has a synthetic spec");
    let trace = generate_synthetic(spec).map_err(CliError::from_param)?;
    let (name, bytes) = if cfg.binary {
        ("trace.mkvt", encode_binary(&trace))
    } else {
        ("trace.json", encode_text(&trace))
    };
    let path = cfg.out.join(name);
    write_output(&path, &bytes)?;
    let h = trace.header();
    Ok(format!(
        "wrote {}\nL={} H={} n={} T={} visual={} text={} checksum={:016x}\n",
        path.display(),
        h.num_layers,
        h.num_heads,
        h.prompt_len,
        h.num_decode_steps,
        h.count(Modality::Visual),
        h.count(Modality::Text),
        trace.checksum()
    ))
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<String, CliError> {
    let proxy = ProxyConfig {
        proxy_count: cfg.proxy_count,
    };
    let mut sparsity: Option<Table> = None;
    let mut shares: Option<Table> = None;
    for path in &cfg.traces {
        let trace = load(path)?;
        let name = trace_name(path);
        let points = sparsity_curve(&trace, &cfg.budgets, &proxy).map_err(CliError::from_param)?;
        append(&mut sparsity, sparsity_table(&name, &points));
        append(&mut shares, head_share_table(&name, &trace));
    }
    let a = write_table(cfg, "sparsity", &sparsity.expect("at least one trace"))?;
    let b = write_table(cfg, "head_share", &shares.expect("at least one trace"))?;
    Ok(format!("wrote {}\nwrote {}\n", a.display(), b.display()))
}

fn append(acc: &mut Option<Table>, table: Table) {
    match acc {
        Some(t) => t.rows.extend(table.rows),
        None => *acc = Some(table),
    }
}

pub fn cmd_run(cfg: &RunConfig) -> Result<String, CliError> {
    let path = &cfg.traces[0];
    let trace = load(path)?;
    let policy = cfg.policies[0].with_budget(cfg.budgets[0]);
    let mask = match &policy {
        PolicySpec::Madakv(pc) => {
            let (plan, mask) = madakv_mask(&trace, pc)?;
            write_output(&cfg.out.join("plan.json"), plan.to_json().as_bytes())?;
            mask
        }
        PolicySpec::Baseline(_) => policy.mask(&trace)?,
    };
    let mut report = replay_with(&trace, &mask, cfg.bytes_per_entry)?;
    report.policy_name = policy.name();
    report.budget_frac = policy.budget_frac();
    write_output(&cfg.out.join("mask.json"), mask.to_json().as_bytes())?;
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    write_output(&cfg.out.join("report.json"), json.as_bytes())?;
    let row = CompareRow {
        trace: trace_name(path),
        report,
    };
    write_table(cfg, "series", &series_table(std::slice::from_ref(&row)))?;
    Ok(format!(
        "{} at budget {}: mean retained mass {:.6}, kept fraction {:.6}, {} warning(s)\n",
        row.report.policy_name,
        row.report.budget_frac,
        row.report.mean_retained_mass,
        row.report.kept_fraction,
        row.report.plan_warnings.len()
    ))
}

/// Every `(budget, policy)` cell on one trace. Cells run in parallel;
/// results come back in cell order.
fn evaluate_trace(cfg: &RunConfig, name: &str, trace: &AttentionTrace) -> Vec<CompareRow> {
    let opts = SimOptions {
        bytes_per_entry: cfg.bytes_per_entry,
    };
    let cells: Vec<PolicySpec> = cfg
        .budgets
        .iter()
        .flat_map(|&b| cfg.policies.iter().map(move |p| p.with_budget(b)))
        .collect();
    cells
        .par_iter()
        .map(|policy| CompareRow {
            trace: name.to_string(),
            report: run_policy(trace, policy, &opts)
                .unwrap_or_else(|e| SimReport::failed(policy.name(), policy.budget_frac(), &e)),
        })
        .collect()
}

/// Kept fraction of a fixed-budget cache at each reference budget.
fn anchor_ratios(trace: &AttentionTrace) -> Vec<(f64, f64)> {
    let n = trace.prompt_len();
    REFERENCE_MEMORY_GIB
        .iter()
        .map(|&(b, _)| {
            let kept = BaselineConfig::new(BaselineKind::RecentWindow, b).budget(n);
            (b, kept as f64 / n as f64)
        })
        .collect()
}

/// Accumulates rows and anchor ratios over traces, then writes the tables.
#[derive(Default)]
struct CompareOutput {
    rows: Vec<CompareRow>,
    ratio_sums: Vec<(f64, f64)>,
    traces: usize,
}

impl CompareOutput {
    fn add(&mut self, cfg: &RunConfig, name: &str, trace: &AttentionTrace) {
        self.rows.extend(evaluate_trace(cfg, name, trace));
        let ratios = anchor_ratios(trace);
        if self.ratio_sums.is_empty() {
            self.ratio_sums = ratios.iter().map(|&(b, _)| (b, 0.0)).collect();
        }
        for (acc, (_, r)) in self.ratio_sums.iter_mut().zip(ratios) {
            acc.1 += r;
        }
        self.traces += 1;
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<String, CliError> {
        sort_compare_rows(&mut self.rows);
        let ratios: Vec<(f64, f64)> = self
            .ratio_sums
            .iter()
            .map(|&(b, s)| (b, s / self.traces as f64))
            .collect();
        let mut summary = String::new();
        for (stem, table) in [
            ("comparison", comparison_table(&self.rows)),
            ("series", series_table(&self.rows)),
            ("memory_anchors", memory_anchor_table(&ratios)),
        ] {
            let path = write_table(cfg, stem, &table)?;
            writeln!(summary, "wrote {}", path.display()).unwrap();
        }
        let failed = self
            .rows
            .iter()
            .filter(|r| r.report.error.is_some())
            .count();
        if failed == self.rows.len() {
            let first = self.rows[0].report.error.as_deref().unwrap_or_default();
            return Err(CliError::Config(format!(
                "every policy evaluation failed; first error: {first}"
            )));
        }
        writeln!(summary, "{} row(s), {failed} failed", self.rows.len()).unwrap();
        Ok(summary)
    }
}

pub fn cmd_compare(cfg: &RunConfig) -> Result<String, CliError> {
    let mut out = CompareOutput::default();
    for path in &cfg.traces {
        // one trace in memory at a time
        let trace = load(path)?;
        out.add(cfg, &trace_name(path), &trace);
    }
    out.finish(cfg)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<String, CliError> {
    let base = cfg.synthetic.as_ref().expect("sweep has a synthetic spec");
    let suite_cfg = cfg.suite.as_ref().expect("sweep has a suite");
    let suite = heterogeneous_suite(base, &suite_cfg.bias_choices, suite_cfg.size)
        .map_err(CliError::from_param)?;
    let mut specs = serde_json::to_string_pretty(&suite).expect("specs serialize");
    specs.push('\n');
    write_output(&cfg.out.join("suite.json"), specs.as_bytes())?;
    let mut out = CompareOutput::default();
    for spec in &suite {
        let trace = generate_synthetic(spec).map_err(CliError::from_param)?;
        out.add(cfg, &format!("synthetic-seed{}", spec.seed), &trace);
    }
    out.finish(cfg)
}
