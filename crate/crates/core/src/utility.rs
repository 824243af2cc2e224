//! Set-valued log-linear utility and its Monte Carlo expectations.
//!
//! `u(a, y) = Σ_k log(ε + Σ_i a_i y_ik) − c‖a‖₁`; `U(a, X)` averages `u` over
//! outcome draws and `U(π, P)` additionally averages over pools and sampled
//! selections.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::policy::Policy;
use crate::rng::SimRng;
use crate::sampling::{OutcomeSampler, PopulationSampler};
use crate::types::{ActionVector, FeatureMatrix, OutcomeMatrix, OutcomeScale};

pub const DEFAULT_EPSILON_LOG: f64 = 1e-6;
pub const DEFAULT_COURSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityConfig {
    /// Per-admission cost `c`.
    pub cost: f64,
    /// Guard inside the logarithm for empty course sums.
    pub epsilon_log: f64,
    pub courses: usize,
    /// Scale the utility expects its outcomes in.
    pub scale: OutcomeScale,
}

impl UtilityConfig {
    pub fn new(cost: f64) -> Result<Self> {
        Self {
            cost,
            epsilon_log: DEFAULT_EPSILON_LOG,
            courses: DEFAULT_COURSES,
            scale: OutcomeScale::Normalized,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.cost >= 0.0 && self.cost.is_finite()) {
            return Err(Error::InvalidConfig(format!("cost must be non-negative, got {}", self.cost)));
        }
        if !(self.epsilon_log > 0.0 && self.epsilon_log <= 1e-3) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_log must lie in (0, 1e-3], got {}",
                self.epsilon_log
            )));
        }
        if self.courses == 0 {
            return Err(Error::InvalidConfig("at least one course is required".into()));
        }
        Ok(self)
    }

    pub fn with_courses(mut self, courses: usize) -> Result<Self> {
        self.courses = courses;
        self.validated()
    }

    pub fn with_epsilon(mut self, epsilon_log: f64) -> Result<Self> {
        self.epsilon_log = epsilon_log;
        self.validated()
    }

    /// Utility evaluated on raw GPAs (for reporting).
    pub fn raw_scale(mut self) -> Self {
        self.scale = OutcomeScale::Raw;
        self
    }

    /// `u` from precomputed per-course sums `Σ_i a_i y_ik` and `‖a‖₁`.
    #[inline]
    pub fn from_sums(&self, sums: &[f64], selected: usize) -> f64 {
        sums.iter().map(|s| (self.epsilon_log + s).ln()).sum::<f64>() - self.cost * selected as f64
    }

    /// Utility of the empty selection, `K log ε`.
    pub fn empty_selection(&self) -> f64 {
        self.courses as f64 * self.epsilon_log.ln()
    }
}

/// `u(a, y)`.
pub fn utility(a: &ActionVector, y: &OutcomeMatrix, cfg: &UtilityConfig) -> Result<f64> {
    ensure_dims("utility rows", a.len(), y.rows())?;
    ensure_dims("utility courses", cfg.courses, y.courses())?;
    if y.scale() != cfg.scale {
        return Err(Error::Schema(format!(
            "utility expects {:?} outcomes, got {:?}",
            cfg.scale,
            y.scale()
        )));
    }
    if y.values().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("outcomes"));
    }
    let sums = course_sums(a, y);
    Ok(cfg.from_sums(&sums, a.selected()))
}

/// Per-course totals of the selected rows.
pub fn course_sums(a: &ActionVector, y: &OutcomeMatrix) -> Vec<f64> {
    let mut sums = vec![0.0; y.courses()];
    for i in a.selected_indices() {
        for (s, v) in sums.iter_mut().zip(y.row(i)) {
            *s += v;
        }
    }
    sums
}

/// Mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl Estimate {
    /// From i.i.d. draws; the standard error uses the unbiased variance.
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std_err = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_err,
            samples: n,
        }
    }

    /// Whether `target` lies within `k` standard errors of the mean.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_err
    }
}

/// Monte Carlo sample counts for the nested expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleCounts {
    pub n_x: usize,
    pub n_a: usize,
    pub n_y: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self { n_x: 4, n_a: 8, n_y: 8 }
    }
}

impl SampleCounts {
    pub fn validated(self) -> Result<Self> {
        if self.n_x == 0 || self.n_a == 0 || self.n_y == 0 {
            return Err(Error::InvalidConfig("sample counts must be at least 1".into()));
        }
        Ok(self)
    }
}

/// `U(a, X)` estimated from `n_y` outcome draws.
pub fn expected_utility_given_x(
    a: &ActionVector,
    x: &FeatureMatrix,
    outcomes: &dyn OutcomeSampler,
    n_y: usize,
    cfg: &UtilityConfig,
    rng: &mut SimRng,
) -> Result<Estimate> {
    if n_y == 0 {
        return Err(Error::InvalidConfig("n_y must be at least 1".into()));
    }
    ensure_dims("action length", x.rows(), a.len())?;
    let draws = (0..n_y)
        .map(|_| {
            let y = outcomes.sample_outcomes(x, rng)?;
            utility(a, &y, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&draws))
}

/// `U(π, P)` by nested sampling: pools, then selections, then outcomes.
///
/// The standard error is computed over per-pool means when `n_x > 1`, and over
/// the per-selection values otherwise; each selection gets its own outcome
/// draws so those values are independent given the pool.
pub fn expected_policy_utility(
    policy: &Policy,
    population: &dyn PopulationSampler,
    outcomes: &dyn OutcomeSampler,
    counts: SampleCounts,
    cfg: &UtilityConfig,
    rng: &mut SimRng,
) -> Result<Estimate> {
    let counts = counts.validated()?;
    let mut per_pool = Vec::with_capacity(counts.n_x);
    let mut per_action = Vec::with_capacity(counts.n_x * counts.n_a);
    for _ in 0..counts.n_x {
        let x = population.sample_population(rng)?;
        let p = policy.accept_prob(&x)?;
        let mut pool_total = 0.0;
        for _ in 0..counts.n_a {
            let a = p.sample(rng);
            let est = expected_utility_given_x(&a, &x, outcomes, counts.n_y, cfg, rng)?;
            pool_total += est.mean;
            per_action.push(est.mean);
        }
        per_pool.push(pool_total / counts.n_a as f64);
    }
    let mut est = if counts.n_x > 1 {
        Estimate::from_samples(&per_pool)
    } else {
        Estimate::from_samples(&per_action)
    };
    est.samples = per_action.len();
    Ok(est)
}

/// Exact `Σ_a π(a|X) u(a, y)` over all `2^n` selections, for constant outcomes.
/// Intended for small pools (`n ≤ 20`).
pub fn enumerate_policy_utility(
    probs: &crate::policy::SelectionProbabilities,
    y: &OutcomeMatrix,
    cfg: &UtilityConfig,
) -> Result<f64> {
    let n = probs.len();
    if n > 20 {
        return Err(Error::InvalidConfig(format!("refusing to enumerate 2^{n} selections")));
    }
    ensure_dims("enumeration rows", n, y.rows())?;
    let mut total = 0.0;
    for i in 0..(1u64 << n) {
        let a = ActionVector::from_index(i, n);
        total += probs.prob(&a) * utility(&a, y, cfg)?;
    }
    Ok(total)
}
