use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cohort");

const PLAN: &str = r#"
setting = "one_shot"
seed = 3
trials = 2
costs = [0.1]
batch_sizes = [30]
iterations = 4
eval_batches = 2
baselines = ["threshold"]

[samples]
n_x = 1
n_a = 4
n_y = 2

[optim]
baseline = "mean"
"#;

fn cohort(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bootstrap(dir: &Path, seed: &str) {
    let cfg = dir.join("bootstrap.toml");
    fs::write(&cfg, "candidates = 300\n").unwrap();
    let out = cohort(&["bootstrap", "--config", path(&cfg), "--out", path(dir), "--seed", seed]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn run(plan: &Path, art: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--plan", path(plan), "--artifacts", path(art), "--out", path(out)];
    args.extend_from_slice(extra);
    cohort(&args)
}

#[test]
fn bootstrap_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    bootstrap(&a, "7");
    bootstrap(&b, "7");
    for f in ["ground_truth.toml", "train.csv", "test.csv", "preprocess.json", "population_model.json", "outcome_model.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn run_report_and_rerun_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("art");
    fs::create_dir_all(&art).unwrap();
    bootstrap(&art, "1");
    let plan = dir.path().join("plan.toml");
    fs::write(&plan, PLAN).unwrap();

    let first = dir.path().join("first");
    let out = run(&plan, &art, &first, &["--fairness-weight", "0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = cohort(&["report", "--out", path(&first)]);
    assert!(report.status.success());
    let report_text = fs::read_to_string(first.join("report.csv")).unwrap();
    // One report line per non-empty metric cell of the trace.
    let trace = fs::read_to_string(first.join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let step = header.iter().position(|h| *h == "step").unwrap();
    let expected: usize = lines
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(j, v)| *j > step && header[*j] != "skipped" && !v.is_empty())
                .count()
        })
        .sum();
    assert_eq!(report_text.lines().count() - 1, expected);
    assert!(cohort(&["report", "--out", path(&first)]).status.success());
    assert_eq!(fs::read_to_string(first.join("report.csv")).unwrap(), report_text);

    let second = dir.path().join("second");
    let out = run(&first.join("manifest.json"), &art, &second, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["trace.csv", "summary.csv", "manifest.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }

    // The manifest pins its artifacts.
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    bootstrap(&other, "2");
    let out = run(&first.join("manifest.json"), &other, &dir.path().join("third"), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("art");
    fs::create_dir_all(&art).unwrap();
    bootstrap(&art, "1");

    let plan = dir.path().join("plan.toml");
    fs::write(&plan, format!("{PLAN}n_q = 3\n")).unwrap();
    let out = run(&plan, &art, &dir.path().join("x"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optim.n_q"));

    fs::write(&plan, PLAN).unwrap();
    let out = run(&plan, &art, &dir.path().join("y"), &["--update-period", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "candidates = 0\n").unwrap();
    let out = cohort(&["bootstrap", "--config", path(&cfg), "--out", path(&dir.path().join("z"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.toml");
    fs::write(&plan, PLAN).unwrap();
    let out = run(&plan, &dir.path().join("no_artifacts"), &dir.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(4));
    let out = run(&dir.path().join("no_plan.toml"), &dir.path().join("a"), &dir.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(4));
    let out = cohort(&["report", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}
