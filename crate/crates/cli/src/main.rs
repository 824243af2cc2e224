use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cohort::experiments::{self, Artifacts, BootstrapConfig, ExperimentPlan, RunManifest, UpdatePeriod};
use log::{error, info};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Missing(_) => 4,
        }
    }
}

impl From<cohort::Error> for CliError {
    fn from(e: cohort::Error) -> Self {
        use cohort::Error as E;
        match e {
            E::InvalidConfig(m) => CliError::Config(m),
            E::Io { .. } => CliError::Io(e.to_string()),
            E::MissingArtifact(m) => CliError::Missing(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "cohort", version, about = "Cohort selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the historical data set and fit the stage-0 models.
    Bootstrap {
        /// TOML bootstrap config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory receiving the artifacts.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment plan against bootstrap artifacts.
    Run {
        /// TOML plan, or the manifest.json of an earlier run to repeat it.
        #[arg(long)]
        plan: PathBuf,
        /// Bootstrap artifact directory.
        #[arg(long)]
        artifacts: PathBuf,
        /// Run directory receiving the outputs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        fairness_weight: Option<f64>,
        /// A positive integer or "never".
        #[arg(long)]
        update_period: Option<String>,
    },
    /// Flatten a run's trace into report.csv (long format).
    Report {
        /// Run directory containing trace.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String, CliError> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::Missing(path.display().to_string())),
        Err(e) => Err(CliError::Io(format!("{}: {e}", path.display()))),
    }
}

/// Deserializes TOML, reporting the key path of the first offending entry.
fn parse_toml<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T, CliError> {
    let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{}: at `{path}`: {}", origin.display(), e.into_inner()))
    })
}

fn bootstrap(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg: BootstrapConfig = match &config {
        Some(p) => parse_toml(&read_text(p)?, p)?,
        None => BootstrapConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // Relative ground-truth paths are resolved against the config file.
    if let (Some(gt), Some(cfg_path)) = (&cfg.ground_truth, &config) {
        if gt.is_relative() {
            cfg.ground_truth = Some(cfg_path.parent().unwrap_or(Path::new(".")).join(gt));
        }
    }
    let cfg = cfg.validated()?;
    let art = Artifacts::bootstrap(&cfg)?;
    let hashes = art.write(&out, &cfg)?;
    for (name, h) in &hashes {
        info!("wrote {name} ({})", &h[..12]);
    }
    Ok(())
}

/// The plan, plus the artifact hashes it must run against when it comes
/// from an earlier run's manifest.
fn load_plan(path: &Path) -> Result<(ExperimentPlan, Option<BTreeMap<String, String>>), CliError> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let m = RunManifest::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return Ok((m.plan, Some(m.artifact_hashes)));
    }
    Ok((parse_toml(&text, path)?, None))
}

#[allow(clippy::too_many_arguments)]
fn run(
    plan: PathBuf,
    artifacts: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    trials: Option<usize>,
    fairness_weight: Option<f64>,
    update_period: Option<String>,
) -> Result<(), CliError> {
    let (mut p, expected) = load_plan(&plan)?;
    if let Some(expected) = expected {
        let (_, found) = Artifacts::load(&artifacts)?;
        if found != expected {
            return Err(CliError::Config(format!(
                "artifacts in {} differ from the ones recorded in {}",
                artifacts.display(),
                plan.display()
            )));
        }
    }
    if let Some(s) = seed {
        p.seed = s;
    }
    if let Some(t) = trials {
        p.trials = t;
    }
    if let Some(w) = fairness_weight {
        p.fairness.weight = w;
    }
    if let Some(u) = update_period {
        p.update_periods = vec![u.parse::<UpdatePeriod>()?];
    }
    let p = p.validated()?;
    info!("running {} plan: {} trial(s), costs {:?}", p.setting.as_str(), p.trials, p.costs);
    let manifest = experiments::execute(&p, &artifacts, &out)?;
    for cell in &manifest.failed_cells {
        error!("failed cell: {cell}");
    }
    info!("outputs written to {}", out.display());
    Ok(())
}

fn report(out: PathBuf) -> Result<(), CliError> {
    let path = experiments::write_report(&out)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bootstrap { config, out, seed } => bootstrap(config, out, seed),
        Command::Run {
            plan,
            artifacts,
            out,
            seed,
            trials,
            fairness_weight,
            update_period,
        } => run(plan, artifacts, out, seed, trials, fairness_weight, update_period),
        Command::Report { out } => report(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.code())
        }
    }
}
