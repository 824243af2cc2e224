//! Experiment plans: every knob of a one-shot or sequential run.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::fairness::{CombineMode, FairnessConfig};
use crate::optimizer::{BaselineMode, OptimConfig};
use crate::policy::{MlpPolicy, PolicyKind};
use crate::utility::{SampleCounts, DEFAULT_EPSILON_LOG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    OneShot,
    Sequential,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::OneShot => "one_shot",
            Setting::Sequential => "sequential",
        }
    }
}

/// How often an adaptive policy is retrained: every `k` stages, or never
/// after the first training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UpdatePeriod {
    Every(u32),
    Never,
}

impl UpdatePeriod {
    /// Retrain after stage `t` (1-based) of `stages`?
    pub fn retrains_after(self, t: usize, stages: usize) -> bool {
        if t >= stages {
            return false;
        }
        match self {
            UpdatePeriod::Every(k) => t == 1 || t % k as usize == 0,
            UpdatePeriod::Never => t == 1,
        }
    }
}

impl fmt::Display for UpdatePeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdatePeriod::Every(k) => write!(f, "{k}"),
            UpdatePeriod::Never => f.write_str("never"),
        }
    }
}

impl std::str::FromStr for UpdatePeriod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "never" | "inf" => Ok(UpdatePeriod::Never),
            other => match other.parse::<u32>() {
                Ok(k) if k >= 1 => Ok(UpdatePeriod::Every(k)),
                _ => Err(Error::InvalidConfig(format!(
                    "update period must be a positive integer or \"never\", got {other:?}"
                ))),
            },
        }
    }
}

impl Serialize for UpdatePeriod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            UpdatePeriod::Every(k) => s.serialize_u32(*k),
            UpdatePeriod::Never => s.serialize_str("never"),
        }
    }
}

impl<'de> Deserialize<'de> for UpdatePeriod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) if k >= 1 && k <= u32::MAX as i64 => Ok(UpdatePeriod::Every(k as u32)),
            Raw::Int(k) => Err(serde::de::Error::custom(format!("update period must be ≥ 1, got {k}"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Fixed comparison rules available in a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Predicted mean GPA above the threshold (one-shot and sequential).
    Threshold,
    /// Top-m by predicted total with m from the threshold rule (one-shot).
    Greedy,
    /// Network trained once at stage 1 and frozen (sequential).
    StaticNetwork,
    /// Logistic policy trained once at stage 1 and frozen (sequential).
    StaticLogistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FairnessSection {
    pub epsilon: f64,
    pub tau: Option<f64>,
    pub lambda_dem: f64,
    pub lambda_eq: f64,
    pub combine: CombineMode,
    /// Weight of `P_overall` in the training loss.
    pub weight: f64,
}

impl Default for FairnessSection {
    fn default() -> Self {
        let d = FairnessConfig::default();
        Self {
            epsilon: d.epsilon,
            tau: d.tau,
            lambda_dem: d.lambda_dem,
            lambda_eq: d.lambda_eq,
            combine: d.combine,
            weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub logistic_eta: f64,
    pub network_eta: f64,
    pub baseline: BaselineMode,
    pub clip_norm: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            logistic_eta: OptimConfig::sgd().eta,
            network_eta: OptimConfig::adam().eta,
            baseline: BaselineMode::None,
            clip_norm: OptimConfig::sgd().clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub widths: [usize; 2],
    pub dropout: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            widths: MlpPolicy::DEFAULT_WIDTHS,
            dropout: MlpPolicy::DEFAULT_DROPOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub setting: Setting,
    pub seed: u64,
    pub trials: usize,
    pub costs: Vec<f64>,
    /// One-shot training batch sizes (candidates per sampled pool).
    pub batch_sizes: Vec<usize>,
    /// Training iterations (per retraining in the sequential setting).
    pub iterations: usize,
    pub policies: Vec<PolicyKind>,
    pub baselines: Vec<BaselineKind>,
    pub stages: usize,
    /// Applicants per stage.
    pub pool_size: usize,
    pub update_periods: Vec<UpdatePeriod>,
    /// Resampled test batches per one-shot evaluation.
    pub eval_batches: usize,
    /// Sampled selections per evaluation batch.
    pub eval_actions: usize,
    pub gpa_threshold: f64,
    pub warm_start: bool,
    pub epsilon_log: f64,
    pub samples: SampleCounts,
    pub fairness: FairnessSection,
    pub optim: OptimSection,
    pub network: NetworkSection,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            setting: Setting::OneShot,
            seed: 0,
            trials: 1,
            costs: vec![0.001, 0.1],
            batch_sizes: vec![100],
            iterations: 1000,
            policies: vec![PolicyKind::Network, PolicyKind::Logistic],
            baselines: Vec::new(),
            stages: 10,
            pool_size: 300,
            update_periods: vec![UpdatePeriod::Every(1)],
            eval_batches: 50,
            eval_actions: 8,
            gpa_threshold: crate::baselines::DEFAULT_GPA_THRESHOLD,
            warm_start: true,
            epsilon_log: DEFAULT_EPSILON_LOG,
            samples: SampleCounts::default(),
            fairness: FairnessSection::default(),
            optim: OptimSection::default(),
            network: NetworkSection::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        plan.validated()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validated(self) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.costs.is_empty() || self.costs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return bad("costs must be a non-empty list of non-negative numbers");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.policies.is_empty() && self.baselines.is_empty() {
            return bad("plan has no policies and no baselines");
        }
        if self.eval_batches == 0 || self.eval_actions == 0 {
            return bad("evaluation counts must be at least 1");
        }
        if !(self.gpa_threshold.is_finite()) {
            return bad("gpa_threshold must be finite");
        }
        match self.setting {
            Setting::OneShot => {
                if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
                    return bad("batch_sizes must be a non-empty list of positive sizes");
                }
                if self
                    .baselines
                    .iter()
                    .any(|b| matches!(b, BaselineKind::StaticNetwork | BaselineKind::StaticLogistic))
                {
                    return bad("static baselines only apply to sequential plans");
                }
            }
            Setting::Sequential => {
                if self.stages == 0 || self.pool_size == 0 {
                    return bad("stages and pool_size must be at least 1");
                }
                if self.update_periods.is_empty() {
                    return bad("update_periods must not be empty");
                }
                if self.baselines.contains(&BaselineKind::Greedy) {
                    return bad("the greedy baseline only applies to one-shot plans");
                }
            }
        }
        self.samples.validated()?;
        self.fairness_config().validated()?;
        self.optim_config(PolicyKind::Logistic).validated()?;
        self.optim_config(PolicyKind::Network).validated()?;
        crate::utility::UtilityConfig::new(0.0)?.with_epsilon(self.epsilon_log)?;
        if !(0.0..1.0).contains(&self.network.dropout) || self.network.widths.contains(&0) {
            return bad("network widths must be positive and dropout in [0, 1)");
        }
        Ok(self)
    }

    pub fn fairness_config(&self) -> FairnessConfig {
        FairnessConfig {
            epsilon: self.fairness.epsilon,
            tau: self.fairness.tau,
            lambda_dem: self.fairness.lambda_dem,
            lambda_eq: self.fairness.lambda_eq,
            combine: self.fairness.combine,
            emc_samples: self.samples,
        }
    }

    pub fn optim_config(&self, kind: PolicyKind) -> OptimConfig {
        let mut cfg = OptimConfig::for_kind(kind);
        cfg.eta = match kind {
            PolicyKind::Logistic => self.optim.logistic_eta,
            PolicyKind::Network => self.optim.network_eta,
        };
        cfg.iterations = self.iterations;
        cfg.counts = self.samples;
        cfg.fairness_weight = self.fairness.weight;
        cfg.baseline = self.optim.baseline;
        cfg.clip_norm = self.optim.clip_norm;
        cfg
    }

    /// Defaults the plan relies on that have no stated value in the method
    /// description; recorded in the manifest.
    pub fn flagged_defaults(&self) -> Vec<String> {
        let mut out = vec![
            format!("network widths {:?}, dropout {}", self.network.widths, self.network.dropout),
            format!("learning rates: logistic sgd {}, network adam {}", self.optim.logistic_eta, self.optim.network_eta),
            format!("gradient clip norm {}", self.optim.clip_norm),
            format!("variance-reduction baseline {:?}", self.optim.baseline).to_lowercase(),
            format!("sample counts n_x={} n_a={} n_y={}", self.samples.n_x, self.samples.n_a, self.samples.n_y),
            format!("log guard epsilon {}", self.epsilon_log),
            format!("fairness combine mode {}", self.fairness.combine.as_str()),
            format!("initial-policy GPA threshold {}", self.gpa_threshold),
        ];
        if self.setting == Setting::Sequential {
            out.push(format!("applicants per stage {}", self.pool_size));
            out.push(format!("policy retraining warm start {}", self.warm_start));
            out.push(format!("iterations per retraining {}", self.iterations));
        }
        out
    }
}
