//! Machine-readable tables: every table has a header row and a
//! `format_version` column, and renders as CSV or JSON.

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::format::FORMAT_VERSION;
use crate::importance::{head_modality_share, SparsityPoint};
use crate::sim::SimReport;
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Parameter(format!("unknown output format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(columns: &[&'static str]) -> Self {
        let mut all = vec!["format_version"];
        all.extend_from_slice(columns);
        Table {
            columns: all,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, cells: Vec<Value>) {
        let mut row = vec![json!(FORMAT_VERSION)];
        row.extend(cells);
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    /// `{"columns": [...], "rows": [{column: value, ...}, ...]}`, keys in column order.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\"columns\":");
        out.push_str(&serde_json::to_string(&self.columns).unwrap());
        out.push_str(",\"rows\":[");
        for (i, row) in self.rows.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str("\n{");
            for (j, (col, cell)) in self.columns.iter().zip(row).enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(col).unwrap());
                out.push(':');
                out.push_str(&serde_json::to_string(cell).unwrap());
            }
            out.push('}');
        }
        out.push_str("\n]}\n");
        out
    }
}

fn cell_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

pub fn sparsity_table(trace_name: &str, points: &[SparsityPoint]) -> Table {
    let mut t = Table::new(&[
        "trace",
        "modality",
        "budget_frac",
        "token_count",
        "kept",
        "retained_share",
    ]);
    for p in points {
        t.push(vec![
            json!(trace_name),
            json!(p.group.as_str()),
            json!(p.budget_frac),
            json!(p.token_count),
            json!(p.kept),
            json!(p.retained_share),
        ]);
    }
    t
}

pub fn head_share_table(trace_name: &str, trace: &AttentionTrace) -> Table {
    let mut t = Table::new(&["trace", "layer", "head", "text_share", "visual_share"]);
    for layer in 0..trace.num_layers() {
        for head in 0..trace.num_heads() {
            let share = head_modality_share(trace, layer, head);
            t.push(vec![
                json!(trace_name),
                json!(layer),
                json!(head),
                json!(share),
                json!(1.0 - share),
            ]);
        }
    }
    t
}

/// One evaluated `(trace, policy, budget)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub trace: String,
    pub report: SimReport,
}

/// Orders rows by trace, budget, descending retained mass, then policy.
pub fn sort_compare_rows(rows: &mut [CompareRow]) {
    rows.sort_by(|a, b| {
        a.trace
            .cmp(&b.trace)
            .then(a.report.budget_frac.total_cmp(&b.report.budget_frac))
            .then(a.report.error.is_some().cmp(&b.report.error.is_some()))
            .then(
                b.report
                    .mean_retained_mass
                    .total_cmp(&a.report.mean_retained_mass),
            )
            .then_with(|| a.report.policy_name.cmp(&b.report.policy_name))
    });
}

pub fn comparison_table(rows: &[CompareRow]) -> Table {
    let mut t = Table::new(&[
        "trace",
        "policy",
        "budget",
        "mean_retained_mass",
        "kept_fraction",
        "memory_bytes_est",
        "status",
        "warnings",
    ]);
    for row in rows {
        let r = &row.report;
        t.push(vec![
            json!(row.trace),
            json!(r.policy_name),
            json!(r.budget_frac),
            json!(r.mean_retained_mass),
            json!(r.kept_fraction),
            json!(r.memory_bytes_est),
            json!(r
                .error
                .as_deref()
                .map_or("ok".to_string(), |e| format!("error: {e}"))),
            json!(r.plan_warnings.len()),
        ]);
    }
    t
}

/// Long-format per-step retained mass, one row per decode step.
pub fn series_table(rows: &[CompareRow]) -> Table {
    let mut t = Table::new(&["trace", "policy", "budget", "step", "retained_mass"]);
    for row in rows {
        for (i, m) in row.report.per_step_retained_mass.iter().enumerate() {
            t.push(vec![
                json!(row.trace),
                json!(row.report.policy_name),
                json!(row.report.budget_frac),
                json!(i + 1),
                json!(m),
            ]);
        }
    }
    t
}

/// Reference KV-cache GPU memory measurements (GiB) at full, 20% and 5%
/// budget, for comparison with the linear model.
pub const REFERENCE_MEMORY_GIB: [(f64, f64); 3] = [(1.0, 1.63), (0.2, 0.41), (0.05, 0.16)];

/// Linear-model memory at each reference budget, scaled so that the full
/// cache matches the reference full-cache figure, next to the measurement.
pub fn memory_anchor_table(model_ratios: &[(f64, f64)]) -> Table {
    let mut t = Table::new(&[
        "budget",
        "model_ratio",
        "model_estimate_gib",
        "reference_gib",
    ]);
    let full = REFERENCE_MEMORY_GIB[0].1;
    for &(budget, reference) in &REFERENCE_MEMORY_GIB {
        let ratio = model_ratios
            .iter()
            .find(|(b, _)| *b == budget)
            .map_or(budget, |(_, r)| *r);
        t.push(vec![
            json!(budget),
            json!(ratio),
            json!(full * ratio),
            json!(reference),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{sparsity_curve, ProxyConfig};
    use crate::synth::uniform_trace;
    use crate::trace::Modality;

    #[test]
    fn csv_has_header_and_version_column() {
        let trace = uniform_trace(1, 1, vec![Modality::Text; 10], 0).unwrap();
        let points = sparsity_curve(&trace, &[0.2, 1.0], &ProxyConfig { proxy_count: 1 }).unwrap();
        let csv_text = sparsity_table("t", &points).to_csv();
        let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
        let headers = reader.headers().unwrap().clone();
        assert_eq!(&headers[0], "format_version");
        let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(&rows[0][0], "1");
        assert_eq!(&rows[0][2], "all");
        assert_eq!(&rows[0][3], "0.2");
        assert_eq!(&rows[0][6], "0.2");
    }

    #[test]
    fn json_keeps_column_order() {
        let trace = uniform_trace(1, 2, vec![Modality::Text; 3], 0).unwrap();
        let text = head_share_table("x", &trace).to_json();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["columns"][0], "format_version");
        assert_eq!(v["rows"].as_array().unwrap().len(), 2);
        assert_eq!(v["rows"][1]["text_share"], 1.0);
        assert!(text.find("\"trace\"").unwrap() < text.find("\"layer\"").unwrap());
    }

    #[test]
    fn memory_anchor_defaults_to_linear_model() {
        let t = memory_anchor_table(&[]);
        let est: Vec<f64> = t.rows.iter().map(|r| r[3].as_f64().unwrap()).collect();
        assert!((est[1] - 0.326).abs() < 1e-12);
        assert!((est[2] - 0.0815).abs() < 1e-12);
        assert_eq!(t.rows[2][4], 0.16);
    }
}
