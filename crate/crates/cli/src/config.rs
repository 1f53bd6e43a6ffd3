//! Command-line flags, the optional TOML config file, and their resolution
//! into a [`RunConfig`]. Flags win over the file, the file over defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use kvsim_core::report::OutputFormat;
use kvsim_core::sim::DEFAULT_BYTES_PER_ENTRY;
use kvsim_core::{
    BaselineConfig, BaselineKind, PolicyConfig, PolicyMode, PolicySpec, SyntheticTraceSpec,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "KVSIM_OUT_DIR";

pub const DEFAULT_BUDGETS: [f64; 5] = [0.05, 0.1, 0.2, 0.4, 0.6];
pub const DEFAULT_ANALYZE_BUDGETS: [f64; 7] = [0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Parser)]
#[command(
    name = "kvsim",
    version,
    about = "Trace-driven KV-cache eviction simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic attention trace.
    Generate(GenerateArgs),
    /// Sparsity curves and per-head modality shares of recorded traces.
    Analyze(AnalyzeArgs),
    /// Evaluate one policy at one budget and dump its plan, mask and report.
    Run(PolicyRunArgs),
    /// Evaluate policies across traces and budgets.
    Compare(PolicyRunArgs),
    /// Generate a heterogeneous synthetic suite and compare policies on it.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $KVSIM_OUT_DIR, then `kvsim-out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Table format.
    #[arg(long, value_parser = ["csv", "json"])]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub decode_steps: Option<usize>,
    /// Zipf exponent of key salience.
    #[arg(long)]
    pub skew: Option<f64>,
    /// Fraction of prompt positions labelled visual.
    #[arg(long)]
    pub mix: Option<f64>,
    /// Visual share per head: one value for all heads or one per head.
    #[arg(long, value_delimiter = ',')]
    pub bias: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PolicyArgs {
    /// Trace file; repeatable.
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    /// `NAME[:key=val,...]`; repeatable.
    #[arg(long)]
    pub policy: Vec<String>,
    /// Comma-separated budget fractions.
    #[arg(long, value_delimiter = ',')]
    pub budget: Option<Vec<f64>>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub proxy_count: Option<usize>,
    #[arg(long, value_parser = ["adaptive", "proportional"])]
    pub mode: Option<String>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub head_normalize: Option<bool>,
    #[arg(long)]
    pub bytes_per_entry: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Write the compact binary encoding instead of JSON.
    #[arg(long)]
    pub binary: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trace file; repeatable.
    #[arg(long)]
    pub trace: Vec<PathBuf>,
    /// Comma-separated budget fractions for the sparsity curve.
    #[arg(long, value_delimiter = ',')]
    pub budget: Option<Vec<f64>>,
    #[arg(long)]
    pub proxy_count: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PolicyRunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Number of traces in the suite.
    #[arg(long)]
    pub suite_size: Option<usize>,
    /// Per-head visual shares to sample from.
    #[arg(long, value_delimiter = ',')]
    pub bias_choices: Option<Vec<f64>>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    #[serde(default)]
    pub traces: Vec<PathBuf>,
    #[serde(default)]
    pub policies: Vec<String>,
    pub budgets: Option<Vec<f64>>,
    pub theta: Option<f64>,
    pub proxy_count: Option<usize>,
    pub mode: Option<String>,
    pub head_normalize: Option<bool>,
    pub bytes_per_entry: Option<u64>,
    #[serde(default)]
    pub synthetic: FileSynth,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSynth {
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub prompt_len: Option<usize>,
    pub decode_steps: Option<usize>,
    pub skew: Option<f64>,
    pub mix: Option<f64>,
    pub bias: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub suite_size: Option<usize>,
    pub bias_choices: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Generate,
    Analyze,
    Run,
    Compare,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteConfig {
    pub size: usize,
    pub bias_choices: Vec<f64>,
}

/// Fully resolved invocation. Serialized as the effective config echoed
/// into the output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub traces: Vec<PathBuf>,
    pub synthetic: Option<SyntheticTraceSpec>,
    pub suite: Option<SuiteConfig>,
    pub binary: bool,
    /// Policy templates; each is evaluated at every budget.
    pub policies: Vec<PolicySpec>,
    pub budgets: Vec<f64>,
    pub proxy_count: usize,
    pub bytes_per_entry: u64,
    pub out: PathBuf,
    pub format: OutputFormat,
}

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        match cli.command {
            Command::Generate(a) => resolve_generate(a),
            Command::Analyze(a) => resolve_analyze(a),
            Command::Run(a) => resolve_policy_run(CommandKind::Run, a),
            Command::Compare(a) => resolve_policy_run(CommandKind::Compare, a),
            Command::Sweep(a) => resolve_sweep(a),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn load_file(common: &CommonArgs) -> Result<FileConfig, CliError> {
    match &common.config {
        Some(path) => FileConfig::load(path),
        None => Ok(FileConfig::default()),
    }
}

fn resolve_out(common: &CommonArgs, file: &FileConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| file.out.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("kvsim-out"))
}

fn resolve_format(common: &CommonArgs, file: &FileConfig) -> Result<OutputFormat, CliError> {
    common
        .format
        .as_deref()
        .or(file.format.as_deref())
        .unwrap_or("csv")
        .parse()
        .map_err(CliError::from_param)
}

fn resolve_synth(args: &SynthArgs, file: &FileSynth) -> Result<SyntheticTraceSpec, CliError> {
    let heads = args.heads.or(file.heads).unwrap_or(4);
    let bias = args
        .bias
        .clone()
        .or_else(|| file.bias.clone())
        .unwrap_or(vec![0.5]);
    let head_preference_bias = if bias.len() == 1 {
        vec![bias[0]; heads]
    } else {
        bias
    };
    let spec = SyntheticTraceSpec {
        num_layers: args.layers.or(file.layers).unwrap_or(4),
        num_heads: heads,
        prompt_len: args.prompt_len.or(file.prompt_len).unwrap_or(256),
        num_decode_steps: args.decode_steps.or(file.decode_steps).unwrap_or(16),
        skew: args.skew.or(file.skew).unwrap_or(1.2),
        modality_mix: args.mix.or(file.mix).unwrap_or(0.5),
        head_preference_bias,
        seed: args.seed.or(file.seed).unwrap_or(0),
    };
    spec.validate().map_err(CliError::from_param)?;
    Ok(spec)
}

fn resolve_traces(flags: &[PathBuf], file: &FileConfig) -> Result<Vec<PathBuf>, CliError> {
    let traces = if flags.is_empty() {
        file.traces.clone()
    } else {
        flags.to_vec()
    };
    if traces.is_empty() {
        return Err(CliError::Config("at least one --trace is required".into()));
    }
    for path in &traces {
        if !path.is_file() {
            return Err(CliError::Config(format!(
                "trace file {} does not exist",
                path.display()
            )));
        }
    }
    Ok(traces)
}

fn resolve_budgets(
    flags: &Option<Vec<f64>>,
    file: &FileConfig,
    default: &[f64],
) -> Result<Vec<f64>, CliError> {
    let budgets = flags
        .clone()
        .or_else(|| file.budgets.clone())
        .unwrap_or(default.to_vec());
    if budgets.is_empty() {
        return Err(CliError::Config("budget list is empty".into()));
    }
    if let Some(b) = budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
        return Err(CliError::Config(format!(
            "budget fractions must lie in (0, 1], got {b}"
        )));
    }
    Ok(budgets)
}

fn resolve_generate(a: GenerateArgs) -> Result<RunConfig, CliError> {
    let file = load_file(&a.common)?;
    Ok(RunConfig {
        command: CommandKind::Generate,
        traces: Vec::new(),
        synthetic: Some(resolve_synth(&a.synth, &file.synthetic)?),
        suite: None,
        binary: a.binary,
        policies: Vec::new(),
        budgets: Vec::new(),
        proxy_count: 0,
        bytes_per_entry: 0,
        out: resolve_out(&a.common, &file),
        format: resolve_format(&a.common, &file)?,
    })
}

fn resolve_analyze(a: AnalyzeArgs) -> Result<RunConfig, CliError> {
    let file = load_file(&a.common)?;
    let proxy_count = a.proxy_count.or(file.proxy_count).unwrap_or(8);
    if proxy_count == 0 {
        return Err(CliError::Config("proxy_count must be at least 1".into()));
    }
    Ok(RunConfig {
        command: CommandKind::Analyze,
        traces: resolve_traces(&a.trace, &file)?,
        synthetic: None,
        suite: None,
        binary: false,
        policies: Vec::new(),
        budgets: resolve_budgets(&a.budget, &file, &DEFAULT_ANALYZE_BUDGETS)?,
        proxy_count,
        bytes_per_entry: 0,
        out: resolve_out(&a.common, &file),
        format: resolve_format(&a.common, &file)?,
    })
}

/// Policy names and budgets shared by run, compare and sweep.
struct PolicySetup {
    policies: Vec<PolicySpec>,
    budgets: Vec<f64>,
    proxy_count: usize,
    bytes_per_entry: u64,
}

fn resolve_policies(
    args: &PolicyArgs,
    file: &FileConfig,
    default_budgets: &[f64],
) -> Result<PolicySetup, CliError> {
    let mut base = PolicyConfig::default();
    if let Some(theta) = args.theta.or(file.theta) {
        base.theta = theta;
    }
    if let Some(p) = args.proxy_count.or(file.proxy_count) {
        base.proxy.proxy_count = p;
    }
    if let Some(mode) = args.mode.as_deref().or(file.mode.as_deref()) {
        base.mode = parse_mode(mode)?;
    }
    if let Some(h) = args.head_normalize.or(file.head_normalize) {
        base.head_normalize_compensation = h;
    }
    let names = if args.policy.is_empty() {
        file.policies.clone()
    } else {
        args.policy.clone()
    };
    let policies = if names.is_empty() {
        default_policies(base)
    } else {
        names
            .iter()
            .map(|n| parse_policy(n, base))
            .collect::<Result<_, _>>()?
    };
    let budgets = resolve_budgets(&args.budget, file, default_budgets)?;
    for p in &policies {
        p.with_budget(budgets[0])
            .validate()
            .map_err(CliError::from_param)?;
    }
    Ok(PolicySetup {
        policies,
        budgets,
        proxy_count: base.proxy.proxy_count,
        bytes_per_entry: args
            .bytes_per_entry
            .or(file.bytes_per_entry)
            .unwrap_or(DEFAULT_BYTES_PER_ENTRY),
    })
}

fn resolve_policy_run(kind: CommandKind, a: PolicyRunArgs) -> Result<RunConfig, CliError> {
    let file = load_file(&a.common)?;
    let default_budgets: &[f64] = if kind == CommandKind::Run {
        &[0.2]
    } else {
        &DEFAULT_BUDGETS
    };
    let setup = resolve_policies(&a.policy, &file, default_budgets)?;
    let traces = resolve_traces(&a.policy.trace, &file)?;
    if kind == CommandKind::Run {
        if traces.len() != 1 || setup.budgets.len() != 1 {
            return Err(CliError::Config(
                "run takes exactly one trace and one budget".into(),
            ));
        }
        if setup.policies.len() != 1 && !(a.policy.policy.is_empty() && file.policies.is_empty()) {
            return Err(CliError::Config("run takes exactly one policy".into()));
        }
    }
    let policies = if kind == CommandKind::Run {
        setup.policies[..1].to_vec()
    } else {
        setup.policies
    };
    Ok(RunConfig {
        command: kind,
        traces,
        synthetic: None,
        suite: None,
        binary: false,
        policies,
        budgets: setup.budgets,
        proxy_count: setup.proxy_count,
        bytes_per_entry: setup.bytes_per_entry,
        out: resolve_out(&a.common, &file),
        format: resolve_format(&a.common, &file)?,
    })
}

fn resolve_sweep(a: SweepArgs) -> Result<RunConfig, CliError> {
    let file = load_file(&a.common)?;
    let setup = resolve_policies(&a.policy, &file, &[0.2])?;
    if !a.policy.trace.is_empty() {
        return Err(CliError::Config(
            "sweep generates its own traces; drop --trace".into(),
        ));
    }
    let suite = SuiteConfig {
        size: a.suite_size.or(file.synthetic.suite_size).unwrap_or(4),
        bias_choices: a
            .bias_choices
            .clone()
            .or_else(|| file.synthetic.bias_choices.clone())
            .unwrap_or(vec![0.1, 0.9]),
    };
    if suite.size == 0 || suite.bias_choices.is_empty() {
        return Err(CliError::Config(
            "suite_size and bias_choices must be non-empty".into(),
        ));
    }
    let synthetic = resolve_synth(&a.synth, &file.synthetic)?;
    kvsim_core::heterogeneous_suite(&synthetic, &suite.bias_choices, 1)
        .map_err(CliError::from_param)?;
    Ok(RunConfig {
        command: CommandKind::Sweep,
        traces: Vec::new(),
        synthetic: Some(synthetic),
        suite: Some(suite),
        binary: false,
        policies: setup.policies,
        budgets: setup.budgets,
        proxy_count: setup.proxy_count,
        bytes_per_entry: setup.bytes_per_entry,
        out: resolve_out(&a.common, &file),
        format: resolve_format(&a.common, &file)?,
    })
}

/// MadaKV in the configured mode plus every baseline.
pub fn default_policies(base: PolicyConfig) -> Vec<PolicySpec> {
    let mut out = vec![PolicySpec::Madakv(base)];
    out.extend(
        BaselineKind::ALL
            .iter()
            .map(|&k| PolicySpec::Baseline(BaselineConfig::new(k, base.budget_frac))),
    );
    out
}

fn parse_mode(s: &str) -> Result<PolicyMode, CliError> {
    match s {
        "adaptive" => Ok(PolicyMode::Adaptive),
        "proportional" => Ok(PolicyMode::Proportional),
        other => Err(CliError::Config(format!("unknown mode `{other}`"))),
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Parses `NAME[:key=val,...]`. MadaKV policies start from `base`, which
/// carries the global `--theta`, `--proxy-count`, `--mode` and
/// `--head-normalize` values.
pub fn parse_policy(text: &str, base: PolicyConfig) -> Result<PolicySpec, CliError> {
    let (name, params) = match text.split_once(':') {
        Some((n, p)) => (n, p),
        None => (text, ""),
    };
    let pairs = params
        .split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.split_once('=')
                .ok_or_else(|| CliError::Config(format!("expected key=value in `{p}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let unknown = |key: &str| CliError::Config(format!("policy `{name}` has no parameter `{key}`"));

    let madakv_mode = match name {
        "madakv" => Some(base.mode),
        "madakv-adaptive" => Some(PolicyMode::Adaptive),
        "madakv-proportional" => Some(PolicyMode::Proportional),
        _ => None,
    };
    if let Some(mode) = madakv_mode {
        let mut cfg = PolicyConfig { mode, ..base };
        for (key, value) in pairs {
            match key {
                "theta" => cfg.theta = parse_value(key, value)?,
                "proxy_count" => cfg.proxy.proxy_count = parse_value(key, value)?,
                "head_normalize" => cfg.head_normalize_compensation = parse_value(key, value)?,
                "min_keep" => cfg.min_keep_per_modality = parse_value(key, value)?,
                "mode" if name == "madakv" => cfg.mode = parse_mode(value)?,
                _ => return Err(unknown(key)),
            }
        }
        return Ok(PolicySpec::Madakv(cfg));
    }

    let kind = BaselineKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| CliError::Config(format!("unknown policy `{name}`")))?;
    let mut cfg = BaselineConfig::new(kind, base.budget_frac);
    for (key, value) in pairs {
        match (kind, key) {
            (BaselineKind::SinkWindow, "sink_count") => cfg.sink_count = parse_value(key, value)?,
            (BaselineKind::FixedModalityPriority, "text_priority_frac") => {
                cfg.text_priority_frac = parse_value(key, value)?
            }
            (BaselineKind::CumulativeTopK | BaselineKind::FixedModalityPriority, "window") => {
                cfg.observation_window = Some(parse_value(key, value)?)
            }
            _ => return Err(unknown(key)),
        }
    }
    Ok(PolicySpec::Baseline(cfg))
}
