use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvsim_core::synth::uniform_trace;
use kvsim_core::{save_trace, Modality};
use serde_json::Value;

fn kvsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvsim"))
        .args(args)
        .env_remove("KVSIM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_trace(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("gen-{seed}"));
    let o = kvsim(&[
        "generate",
        "--out",
        s(&out),
        "--layers",
        "2",
        "--heads",
        "2",
        "--prompt-len",
        "60",
        "--decode-steps",
        "4",
        "--seed",
        seed,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("trace.json")
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let headers = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (headers, rows)
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_trace(dir.path(), "7");
    let out_b = dir.path().join("again");
    let o = kvsim(&[
        "generate",
        "--out",
        s(&out_b),
        "--layers",
        "2",
        "--heads",
        "2",
        "--prompt-len",
        "60",
        "--decode-steps",
        "4",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(out_b.join("trace.json")).unwrap()
    );
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.contains("L=2 H=2 n=60 T=4"), "{summary}");

    let o = kvsim(&[
        "analyze",
        "--trace",
        s(&a),
        "--out",
        s(&dir.path().join("an")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn binary_traces_are_accepted_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bin");
    let o = kvsim(&[
        "generate",
        "--binary",
        "--out",
        s(&out),
        "--prompt-len",
        "30",
        "--decode-steps",
        "2",
    ]);
    assert_eq!(code(&o), 0);
    let o = kvsim(&[
        "run",
        "--trace",
        s(&out.join("trace.mkvt")),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_generator_parameters_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["--prompt-len", "0"],
        vec!["--skew", "-1"],
        vec!["--mix", "1.5"],
        vec!["--heads", "3", "--bias", "0.1,0.2"],
    ] {
        let mut full = vec!["generate", "--out", s(dir.path())];
        full.extend(args.iter().copied());
        let o = kvsim(&full);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    assert_eq!(code(&kvsim(&["generate", "--bogus-flag"])), 2);
}

#[test]
fn malformed_trace_exits_3_and_missing_trace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format_version\":1,\"header\":{}}").unwrap();
    let out = dir.path().join("o");
    for cmd in ["analyze", "compare", "run"] {
        let o = kvsim(&[cmd, "--trace", s(&bad), "--out", s(&out)]);
        assert_eq!(code(&o), 3, "{cmd}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert!(err.contains("header"), "{err}");
    }
    let o = kvsim(&[
        "analyze",
        "--trace",
        s(&dir.path().join("absent.json")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    std::fs::write(&file, "x").unwrap();
    let o = kvsim(&[
        "generate",
        "--out",
        s(&file.join("sub")),
        "--prompt-len",
        "8",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn uniform_trace_sparsity_and_all_text_shares() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("uniform.json");
    save_trace(
        &uniform_trace(2, 2, vec![Modality::Text; 10], 1).unwrap(),
        &trace,
    )
    .unwrap();
    let out = dir.path().join("an");
    let o = kvsim(&[
        "analyze",
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--budget",
        "0.2,0.5",
        "--proxy-count",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let (headers, rows) = read_csv(&out.join("sparsity.csv"));
    assert_eq!(headers[0], "format_version");
    let row = rows
        .iter()
        .find(|r| r[2] == "all" && r[3] == "0.2")
        .unwrap();
    assert_eq!(row[6], "0.2");

    let (headers, rows) = read_csv(&out.join("head_share.csv"));
    let col = headers.iter().position(|h| h == "text_share").unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[col] == "1.0"));
}

#[test]
fn json_tables_parse_with_declared_columns() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "3");
    let out = dir.path().join("j");
    let o = kvsim(&[
        "analyze",
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--format",
        "json",
    ]);
    assert_eq!(code(&o), 0);
    let v: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sparsity.json")).unwrap()).unwrap();
    let columns: Vec<&str> = v["columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    assert_eq!(columns[0], "format_version");
    for row in v["rows"].as_array().unwrap() {
        let keys: Vec<&str> = row
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        assert_eq!(keys.len(), columns.len());
        assert_eq!(row["format_version"], 1);
    }
}

#[test]
fn compare_emits_cartesian_product_in_stated_order() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = small_trace(dir.path(), "1");
    let t2 = small_trace(dir.path(), "2");
    let out = dir.path().join("cmp");
    let o = kvsim(&[
        "compare",
        "--trace",
        s(&t1),
        "--trace",
        s(&t2),
        "--out",
        s(&out),
        "--budget",
        "0.05,0.1,0.2,0.4,0.6",
        "--policy",
        "madakv",
        "--policy",
        "recent-window",
        "--policy",
        "sink-window:sink_count=1",
        "--policy",
        "cumulative-topk",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (headers, rows) = read_csv(&out.join("comparison.csv"));
    assert_eq!(rows.len(), 2 * 4 * 5);
    let idx = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let key = |r: &Vec<String>| {
        (
            r[idx("trace")].clone(),
            r[idx("budget")].parse::<f64>().unwrap(),
            -r[idx("mean_retained_mass")].parse::<f64>().unwrap(),
            r[idx("policy")].clone(),
        )
    };
    for w in rows.windows(2) {
        assert!(
            key(&w[0]).partial_cmp(&key(&w[1])).unwrap().is_le(),
            "{:?} then {:?}",
            w[0],
            w[1]
        );
    }
    let (_, series) = read_csv(&out.join("series.csv"));
    assert_eq!(series.len(), 2 * 4 * 5 * 4);
    assert!(out.join("memory_anchors.csv").is_file());
    let echoed: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("effective_config.json")).unwrap())
            .unwrap();
    assert_eq!(echoed["command"], "compare");
    assert_eq!(echoed["policies"].as_array().unwrap().len(), 4);
}

#[test]
fn full_budget_retains_everything_for_fixed_budget_policies() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "5");
    let out = dir.path().join("full");
    let o = kvsim(&[
        "compare",
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--budget",
        "1.0",
        "--policy",
        "madakv-proportional",
        "--policy",
        "madakv-adaptive:theta=1.0",
        "--policy",
        "recent-window",
        "--policy",
        "sink-window",
        "--policy",
        "cumulative-topk",
        "--policy",
        "fixed-modality-priority",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (headers, rows) = read_csv(&out.join("comparison.csv"));
    let mass = headers
        .iter()
        .position(|h| h == "mean_retained_mass")
        .unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r[mass] == "1.0"), "{rows:?}");
}

#[test]
fn partial_failures_are_rows_total_failure_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "4");
    let out = dir.path().join("partial");
    // budget 0.05 of 60 is 3 positions, below the 4 sinks
    let o = kvsim(&[
        "compare",
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--budget",
        "0.05,0.5",
        "--policy",
        "sink-window",
        "--policy",
        "recent-window",
    ]);
    assert_eq!(code(&o), 0);
    let (headers, rows) = read_csv(&out.join("comparison.csv"));
    let status = headers.iter().position(|h| h == "status").unwrap();
    let failed: Vec<_> = rows
        .iter()
        .filter(|r| r[status].starts_with("error"))
        .collect();
    assert_eq!(failed.len(), 1);

    let o = kvsim(&[
        "compare",
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--budget",
        "0.05",
        "--policy",
        "sink-window",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "6");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = kvsim(&[
            "compare",
            "--trace",
            s(&trace),
            "--out",
            s(&out),
            "--budget",
            "0.1,0.3",
        ]);
        assert_eq!(code(&o), 0);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["comparison.csv", "series.csv", "memory_anchors.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn run_writes_plan_mask_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "8");
    let out = dir.path().join("run");
    let o = kvsim(&[
        "run",
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--mode",
        "proportional",
        "--budget",
        "0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plan =
        kvsim_core::BudgetPlan::from_json(&std::fs::read_to_string(out.join("plan.json")).unwrap())
            .unwrap();
    let mask = kvsim_core::EvictionMask::from_json(
        &std::fs::read_to_string(out.join("mask.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(plan.total_retained(), mask.total_kept());
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["policy_name"], "madakv-proportional");

    let o = kvsim(&[
        "run",
        "--trace",
        s(&trace),
        "--out",
        s(&out),
        "--budget",
        "0.1,0.2",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn output_dir_env_is_a_default_the_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let env_dir = dir.path().join("from-env");
    let flag_dir = dir.path().join("from-flag");
    let gen = |extra: &[&str]| {
        let mut args = vec!["generate", "--prompt-len", "8", "--decode-steps", "1"];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_kvsim"))
            .args(&args)
            .env("KVSIM_OUT_DIR", &env_dir)
            .output()
            .unwrap()
    };
    assert_eq!(code(&gen(&[])), 0);
    assert!(env_dir.join("trace.json").is_file());
    assert_eq!(code(&gen(&["--out", s(&flag_dir)])), 0);
    assert!(flag_dir.join("trace.json").is_file());
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let trace = small_trace(dir.path(), "9");
    let cfg = dir.path().join("kvsim.toml");
    std::fs::write(
        &cfg,
        format!(
            "traces = [{:?}]\nbudgets = [0.3]\npolicies = [\"recent-window\"]\nformat = \"json\"\n",
            s(&trace)
        ),
    )
    .unwrap();
    let out = dir.path().join("cfg-out");
    let o = kvsim(&[
        "compare",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--budget",
        "0.4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap())
            .unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["budget"], 0.4);
    assert_eq!(rows[0]["policy"], "recent-window");
}

#[test]
fn sweep_generates_a_suite_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = kvsim(&[
        "sweep",
        "--out",
        s(&out),
        "--layers",
        "2",
        "--heads",
        "4",
        "--prompt-len",
        "64",
        "--decode-steps",
        "3",
        "--suite-size",
        "3",
        "--seed",
        "11",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (_, rows) = read_csv(&out.join("comparison.csv"));
    assert_eq!(rows.len(), 3 * 5);
    let suite: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("suite.json")).unwrap()).unwrap();
    assert_eq!(suite.as_array().unwrap().len(), 3);
    assert_eq!(suite[2]["seed"], 13);
}
