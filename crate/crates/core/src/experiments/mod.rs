//! Experiment harnesses and their on-disk outputs.
//!
//! A run directory holds `trace.csv`, `summary.csv`, `manifest.json` and, for
//! sequential plans, `stages.json`. While a run is in progress completed
//! trials are mirrored to `trace.partial.csv`; a run that aborts leaves that
//! file and a `FAILED` marker behind.

mod artifacts;
mod one_shot;
mod output;
mod plan;
mod sequential;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use log::{info, warn};

pub use artifacts::{labelled_rows, Artifacts, BootstrapConfig, BootstrapManifest, BOOTSTRAP_MANIFEST};
pub use one_shot::{evaluate_batch, evaluate_on_test, initial_policy, run_one_shot, train_cell, Evaluation, Selector, TrainedCell};
pub use output::{
    aggregate, mean_stderr, report_csv, sha256_hex, summary_csv, trace_csv, trace_header, write_atomic, BaselineIdentity, Phase,
    RunManifest, SummaryRow, TraceRow, FAILED_MARKER, MANIFEST_FILE, PARTIAL_TRACE_FILE, REPORT_FILE, STAGES_FILE, SUMMARY_FILE,
    TRACE_FILE,
};
pub use plan::{BaselineKind, ExperimentPlan, FairnessSection, NetworkSection, OptimSection, Setting, UpdatePeriod};
pub use sequential::{plan_methods, run_chain, run_sequential, ModelVersions, SequentialMethod, StageRecord};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// Everything a harness produces before it is written to disk.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub rows: Vec<TraceRow>,
    pub stages: Vec<StageRecord>,
    pub trial_seeds: Vec<u64>,
    /// One-shot cells that failed; the sweep carried on without them.
    pub failures: Vec<String>,
}

/// Root of trial `t`'s stream tree.
pub fn trial_stream(seed: u64, trial: usize) -> Stream {
    Stream::root(seed).named("trial").child(trial as u64)
}

pub fn run_plan(plan: &ExperimentPlan, art: &Artifacts, on_trial: &(dyn Fn(usize, &[TraceRow]) + Sync)) -> Result<RunOutput> {
    match plan.setting {
        Setting::OneShot => run_one_shot(plan, art, on_trial),
        Setting::Sequential => run_sequential(plan, art, on_trial),
    }
}

/// Trailing moving average over at most `window` points.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

fn baseline_identities(plan: &ExperimentPlan) -> Vec<BaselineIdentity> {
    plan.baselines
        .iter()
        .map(|b| {
            let (name, params): (&str, Vec<(&str, String)>) = match b {
                BaselineKind::Threshold => ("threshold", vec![("gpa_threshold", plan.gpa_threshold.to_string())]),
                BaselineKind::Greedy => (
                    "greedy",
                    vec![
                        ("gpa_threshold", plan.gpa_threshold.to_string()),
                        ("m", "threshold selection count".to_string()),
                    ],
                ),
                BaselineKind::StaticNetwork => ("static_network", vec![("trained_after_stage", "1".to_string())]),
                BaselineKind::StaticLogistic => ("static_logistic", vec![("trained_after_stage", "1".to_string())]),
            };
            BaselineIdentity {
                name: name.to_string(),
                params: params.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            }
        })
        .collect()
}

/// Serialized outputs of a finished run, keyed by file name.
pub fn render_outputs(plan: &ExperimentPlan, art: &Artifacts, artifact_hashes: &BTreeMap<String, String>, out: &RunOutput) -> Result<Vec<(String, Vec<u8>)>> {
    let levels = art.ground_truth.schema().group_levels()?.to_vec();
    let trace = trace_csv(&out.rows, &levels)?;
    let summary = summary_csv(&aggregate(&out.rows, &levels))?;
    let mut files = vec![(TRACE_FILE.to_string(), trace), (SUMMARY_FILE.to_string(), summary)];
    if plan.setting == Setting::Sequential {
        files.push((STAGES_FILE.to_string(), serde_json::to_string_pretty(&out.stages)?.into_bytes()));
    }
    let manifest = RunManifest {
        format_version: RunManifest::VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        plan: plan.clone(),
        root_seed: plan.seed,
        trial_seeds: out.trial_seeds.clone(),
        ground_truth_hash: art.ground_truth.state_hash(),
        artifact_hashes: artifact_hashes.clone(),
        output_hashes: files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect(),
        baselines: baseline_identities(plan),
        flagged_defaults: plan.flagged_defaults(),
        failed_cells: out.failures.clone(),
    };
    files.push((MANIFEST_FILE.to_string(), manifest.to_json()?.into_bytes()));
    Ok(files)
}

/// Loads artifacts from `artifacts_dir`, runs `plan` and writes the run
/// directory. On an aborted run the completed trials stay in
/// `trace.partial.csv` next to a `FAILED` marker holding the error.
pub fn execute(plan: &ExperimentPlan, artifacts_dir: &Path, out_dir: &Path) -> Result<RunManifest> {
    let plan = plan.clone().validated()?;
    let (art, hashes) = Artifacts::load(artifacts_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for stale in [FAILED_MARKER, PARTIAL_TRACE_FILE] {
        let p = out_dir.join(stale);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let levels = art.ground_truth.schema().group_levels()?.to_vec();
    let done: Mutex<BTreeMap<usize, Vec<TraceRow>>> = Mutex::new(BTreeMap::new());
    let partial = out_dir.join(PARTIAL_TRACE_FILE);
    let on_trial = |t: usize, rows: &[TraceRow]| {
        let mut done = done.lock().expect("trace mirror lock");
        done.insert(t, rows.to_vec());
        let all: Vec<TraceRow> = done.values().flatten().cloned().collect();
        match trace_csv(&all, &levels).and_then(|b| write_atomic(&partial, &b)) {
            Ok(()) => info!("trial {t} finished ({} trials done)", done.len()),
            Err(e) => warn!("could not mirror partial trace: {e}"),
        }
    };
    let result = run_plan(&plan, &art, &on_trial).and_then(|out| Ok((render_outputs(&plan, &art, &hashes, &out)?, out)));
    match result {
        Ok((files, out)) => {
            for (name, bytes) in &files {
                write_atomic(&out_dir.join(name), bytes)?;
            }
            if partial.exists() {
                fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
            }
            for f in &out.failures {
                warn!("cell failed: {f}");
            }
            let manifest_text = &files.iter().find(|(n, _)| n == MANIFEST_FILE).expect("manifest rendered").1;
            RunManifest::from_json(std::str::from_utf8(manifest_text).expect("utf-8 manifest"))
        }
        Err(e) => {
            let _ = write_atomic(&out_dir.join(FAILED_MARKER), format!("{e}\n").as_bytes());
            Err(e)
        }
    }
}

/// Writes `report.csv` (long format) next to the run's `trace.csv`.
pub fn write_report(run_dir: &Path) -> Result<std::path::PathBuf> {
    let trace_path = run_dir.join(TRACE_FILE);
    if !trace_path.is_file() {
        return Err(Error::MissingArtifact(trace_path.display().to_string()));
    }
    let trace = fs::read(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    let report = report_csv(&trace)?;
    let out = run_dir.join(REPORT_FILE);
    write_atomic(&out, &report)?;
    Ok(out)
}
