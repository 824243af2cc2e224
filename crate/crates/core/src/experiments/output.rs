//! Trace rows, aggregation, manifests and crash-safe file output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{ExperimentPlan, Setting, UpdatePeriod};
use crate::error::{Error, Result};

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STAGES_FILE: &str = "stages.json";
pub const REPORT_FILE: &str = "report.csv";
pub const PARTIAL_TRACE_FILE: &str = "trace.partial.csv";
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// One optimizer iteration on model-sampled pools.
    Train,
    /// Final evaluation of a trained one-shot policy on held-out data.
    Eval,
    /// One admission cycle of the sequential loop.
    Stage,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Eval => "eval",
            Phase::Stage => "stage",
        }
    }
}

/// One line of `trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub setting: Setting,
    pub method: String,
    pub cost: f64,
    pub batch_size: usize,
    pub update_period: Option<UpdatePeriod>,
    pub trial: usize,
    pub phase: Phase,
    pub step: usize,
    pub utility: f64,
    pub admission_rate: f64,
    pub p_dem: f64,
    pub p_eq: f64,
    pub p_overall: f64,
    pub group_rates: Vec<Option<f64>>,
    pub grad_norm: Option<f64>,
    pub skipped: Option<bool>,
}

const CONFIG_COLUMNS: [&str; 8] = ["setting", "method", "cost", "batch_size", "update_period", "trial", "phase", "step"];

pub fn trace_header(group_levels: &[String]) -> Vec<String> {
    let mut h: Vec<String> = CONFIG_COLUMNS.iter().map(|s| s.to_string()).collect();
    h.extend(["utility", "admission_rate", "p_dem", "p_eq", "p_overall"].map(String::from));
    h.extend(group_levels.iter().map(|l| format!("rate_{l}")));
    h.extend(["grad_norm", "skipped"].map(String::from));
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl TraceRow {
    fn cells(&self) -> Vec<String> {
        let mut c = vec![
            self.setting.as_str().to_string(),
            self.method.clone(),
            self.cost.to_string(),
            self.batch_size.to_string(),
            opt(self.update_period),
            self.trial.to_string(),
            self.phase.as_str().to_string(),
            self.step.to_string(),
            self.utility.to_string(),
            self.admission_rate.to_string(),
            self.p_dem.to_string(),
            self.p_eq.to_string(),
            self.p_overall.to_string(),
        ];
        c.extend(self.group_rates.iter().map(|r| opt(*r)));
        c.push(opt(self.grad_norm));
        c.push(opt(self.skipped.map(u8::from)));
        c
    }

    /// `(name, value)` for every numeric metric present on the row.
    pub fn metrics(&self, group_levels: &[String]) -> Vec<(String, f64)> {
        let mut m = vec![
            ("utility".to_string(), self.utility),
            ("admission_rate".to_string(), self.admission_rate),
            ("p_dem".to_string(), self.p_dem),
            ("p_eq".to_string(), self.p_eq),
            ("p_overall".to_string(), self.p_overall),
        ];
        for (level, r) in group_levels.iter().zip(&self.group_rates) {
            if let Some(r) = r {
                m.push((format!("rate_{level}"), *r));
            }
        }
        if let Some(g) = self.grad_norm {
            m.push(("grad_norm".to_string(), g));
        }
        m
    }
}

pub fn trace_csv(rows: &[TraceRow], group_levels: &[String]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(trace_header(group_levels))?;
    for r in rows {
        if r.group_rates.len() != group_levels.len() {
            return Err(Error::DimensionMismatch {
                context: "trace group rates",
                expected: group_levels.len(),
                found: r.group_rates.len(),
            });
        }
        w.write_record(r.cells())?;
    }
    w.into_inner().map_err(|e| Error::io("trace.csv", e.into_error()))
}

/// Mean and standard error over trials of one metric at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: Setting,
    pub method: String,
    pub cost: f64,
    pub batch_size: usize,
    pub update_period: Option<UpdatePeriod>,
    pub phase: Phase,
    pub step: usize,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Sample mean and standard error (`sd / sqrt(n)`, zero for one value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

type SummaryKey = (Setting, String, u64, usize, Option<UpdatePeriod>, Phase, usize, String);

/// Per-configuration, per-step, per-metric aggregation across trials. The
/// output order depends only on the set of rows, not on their order.
pub fn aggregate(rows: &[TraceRow], group_levels: &[String]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<SummaryKey, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        for (metric, v) in r.metrics(group_levels) {
            let key = (r.setting, r.method.clone(), r.cost.to_bits(), r.batch_size, r.update_period, r.phase, r.step, metric);
            groups.entry(key).or_default().push((r.trial, v));
        }
    }
    groups
        .into_iter()
        .map(|((setting, method, cost, batch_size, update_period, phase, step, metric), mut vals)| {
            // Summation order fixed by trial index.
            vals.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let v: Vec<f64> = vals.into_iter().map(|(_, v)| v).collect();
            let (mean, stderr) = mean_stderr(&v);
            SummaryRow {
                setting,
                method,
                cost: f64::from_bits(cost),
                batch_size,
                update_period,
                phase,
                step,
                metric,
                mean,
                stderr,
                n: v.len(),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "setting",
        "method",
        "cost",
        "batch_size",
        "update_period",
        "phase",
        "step",
        "metric",
        "mean",
        "stderr",
        "n",
    ])?;
    for r in rows {
        w.write_record([
            r.setting.as_str().to_string(),
            r.method.clone(),
            r.cost.to_string(),
            r.batch_size.to_string(),
            opt(r.update_period),
            r.phase.as_str().to_string(),
            r.step.to_string(),
            r.metric.clone(),
            r.mean.to_string(),
            r.stderr.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::io("summary.csv", e.into_error()))
}

/// Long-format table from a trace: the config columns, `metric` and `value`,
/// one row per non-empty metric cell.
pub fn report_csv(trace: &[u8]) -> Result<Vec<u8>> {
    let mut rd = csv::Reader::from_reader(trace);
    let header = rd.headers()?.clone();
    let step_col = header
        .iter()
        .position(|h| h == "step")
        .ok_or_else(|| Error::Schema("trace has no step column".into()))?;
    let metric_cols: Vec<usize> = (step_col + 1..header.len()).filter(|&j| &header[j] != "skipped").collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut out_header: Vec<&str> = header.iter().take(step_col + 1).collect();
    out_header.extend(["metric", "value"]);
    w.write_record(&out_header)?;
    for rec in rd.records() {
        let rec = rec?;
        for &j in &metric_cols {
            if rec[j].is_empty() {
                continue;
            }
            let mut row: Vec<&str> = rec.iter().take(step_col + 1).collect();
            row.push(&header[j]);
            row.push(&rec[j]);
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| Error::io("report.csv", e.into_error()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes via a temporary sibling and a rename, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Identity of a comparison rule as recorded in manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineIdentity {
    pub name: String,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub plan: ExperimentPlan,
    pub root_seed: u64,
    /// Stream seed of every trial, in trial order.
    pub trial_seeds: Vec<u64>,
    pub ground_truth_hash: String,
    pub artifact_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub baselines: Vec<BaselineIdentity>,
    pub flagged_defaults: Vec<String>,
    /// One-shot cells that failed while the sweep continued.
    pub failed_cells: Vec<String>,
}

impl RunManifest {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format_version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: m.format_version,
            });
        }
        Ok(m)
    }
}
