use std::path::Path;
use std::sync::OnceLock;

use cohort::experiments::{
    aggregate, execute, mean_stderr, run_one_shot, run_sequential, Artifacts, BaselineKind, BootstrapConfig, ExperimentPlan, Phase,
    RunManifest, Setting, StageRecord, UpdatePeriod, FAILED_MARKER, MANIFEST_FILE, PARTIAL_TRACE_FILE, STAGES_FILE, SUMMARY_FILE,
    TRACE_FILE,
};
use cohort::optimizer::BaselineMode;
use cohort::utility::SampleCounts;

fn artifacts() -> &'static Artifacts {
    static ART: OnceLock<Artifacts> = OnceLock::new();
    ART.get_or_init(|| Artifacts::bootstrap(&BootstrapConfig::default()).unwrap())
}

fn small_samples() -> SampleCounts {
    SampleCounts { n_x: 2, n_a: 4, n_y: 2 }
}

fn sequential_plan() -> ExperimentPlan {
    ExperimentPlan {
        setting: Setting::Sequential,
        iterations: 8,
        trials: 2,
        stages: 3,
        pool_size: 80,
        costs: vec![0.1],
        policies: vec![cohort::policy::PolicyKind::Logistic],
        update_periods: vec![UpdatePeriod::Never],
        baselines: vec![BaselineKind::StaticLogistic, BaselineKind::Threshold],
        samples: small_samples(),
        ..Default::default()
    }
}

fn chain<'a>(stages: &'a [StageRecord], method: &str, trial: usize) -> Vec<&'a StageRecord> {
    stages.iter().filter(|s| s.method == method && s.trial == trial).collect()
}

#[test]
fn sequential_run_has_one_record_per_stage_and_static_matches_never_updating() {
    let plan = sequential_plan();
    let out = run_sequential(&plan, artifacts(), &|_, _| {}).unwrap();
    let hash = artifacts().ground_truth.state_hash();
    for trial in 0..plan.trials {
        let adaptive = chain(&out.stages, "adaptive_logistic", trial);
        let fixed = chain(&out.stages, "static_logistic", trial);
        assert_eq!(adaptive.len(), 3);
        assert_eq!(fixed.len(), 3);
        for (a, s) in adaptive.iter().zip(&fixed) {
            assert_eq!(a.actions, s.actions);
            assert_eq!(a.utility.to_bits(), s.utility.to_bits());
        }
        // One training after stage 1, none later.
        let versions: Vec<usize> = fixed.iter().map(|s| s.models.policy_version).collect();
        assert_eq!(versions, vec![0, 1, 1]);
    }
    assert!(out.stages.iter().all(|s| s.ground_truth_hash == hash));
    assert_eq!(out.rows.len(), out.stages.len());
    assert!(out.rows.iter().all(|r| r.phase == Phase::Stage));
}

#[test]
fn only_admitted_outcomes_reach_the_outcome_model() {
    let plan = sequential_plan();
    let out = run_sequential(&plan, artifacts(), &|_, _| {}).unwrap();
    for trial in 0..plan.trials {
        let recs = chain(&out.stages, "adaptive_logistic", trial);
        for pair in recs.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            assert_eq!(prev.admitted_outcomes.len(), prev.actions.selected());
            assert!(!prev.models.refit_failed);
            assert_eq!(
                next.models.outcome_observations - prev.models.outcome_observations,
                prev.admitted_outcomes.len()
            );
            // The applicant model sees every applicant, admitted or not.
            assert_eq!(next.models.population_fit_rows - prev.models.population_fit_rows, prev.applicants);
        }
        // The threshold baseline never learns.
        let fixed = chain(&out.stages, "gpa_threshold", trial);
        assert!(fixed.iter().all(|s| s.models.outcome_observations == fixed[0].models.outcome_observations));
    }
}

#[test]
fn one_shot_runs_are_deterministic_and_aggregate_by_trial() {
    let mut plan = ExperimentPlan {
        iterations: 6,
        trials: 3,
        batch_sizes: vec![40],
        costs: vec![0.1],
        eval_batches: 3,
        samples: small_samples(),
        baselines: vec![BaselineKind::Greedy],
        ..Default::default()
    };
    plan.optim.baseline = BaselineMode::Mean;
    let a = run_one_shot(&plan, artifacts(), &|_, _| {}).unwrap();
    let b = run_one_shot(&plan, artifacts(), &|_, _| {}).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.trial_seeds, b.trial_seeds);
    assert!(a.failures.is_empty());

    let levels = artifacts().ground_truth.schema().group_levels().unwrap().to_vec();
    let summary = aggregate(&a.rows, &levels);
    let evals: Vec<f64> = a
        .rows
        .iter()
        .filter(|r| r.method == "network" && r.phase == Phase::Eval)
        .map(|r| r.utility)
        .collect();
    assert_eq!(evals.len(), 3);
    let row = summary
        .iter()
        .find(|s| s.method == "network" && s.phase == Phase::Eval && s.metric == "utility")
        .unwrap();
    let (mean, se) = mean_stderr(&evals);
    assert_eq!(row.n, 3);
    assert!((row.mean - mean).abs() < 1e-12 && (row.stderr - se).abs() < 1e-12);
    let m = evals.iter().sum::<f64>() / 3.0;
    let sd = (evals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((se - sd / 3f64.sqrt()).abs() < 1e-12);
}

#[test]
fn execute_writes_outputs_and_clears_stale_markers() {
    let dir = tempfile::tempdir().unwrap();
    let art_dir = dir.path().join("art");
    let cfg = BootstrapConfig {
        candidates: 400,
        ..Default::default()
    };
    let hashes = Artifacts::bootstrap(&cfg).unwrap().write(&art_dir, &cfg).unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(FAILED_MARKER), "old failure").unwrap();
    std::fs::write(out.join(PARTIAL_TRACE_FILE), "stale").unwrap();

    let manifest = execute(&sequential_plan(), &art_dir, &out).unwrap();
    for f in [TRACE_FILE, SUMMARY_FILE, MANIFEST_FILE, STAGES_FILE] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(!out.join(FAILED_MARKER).exists());
    assert!(!out.join(PARTIAL_TRACE_FILE).exists());
    assert_eq!(manifest.artifact_hashes, hashes);
    assert_eq!(manifest.trial_seeds.len(), 2);
    let on_disk = RunManifest::from_json(&std::fs::read_to_string(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk.plan, manifest.plan);
    let trace = std::fs::read(out.join(TRACE_FILE)).unwrap();
    assert_eq!(on_disk.output_hashes[TRACE_FILE], cohort::experiments::sha256_hex(&trace));
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = execute(&sequential_plan(), &dir.path().join("nowhere"), &dir.path().join("run")).unwrap_err();
    assert!(matches!(err, cohort::Error::MissingArtifact(_)));
}

#[test]
fn shipped_plans_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../plans");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        if path.file_name().unwrap() == "bootstrap.toml" {
            let cfg: BootstrapConfig = toml::from_str(&text).unwrap();
            cfg.validated().unwrap();
        } else {
            ExperimentPlan::from_toml(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        }
        seen += 1;
    }
    assert!(seen >= 5);
}
