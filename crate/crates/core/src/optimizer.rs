//! Score-function (REINFORCE) estimation of `∇_θ U(π_θ, P)` and first-order
//! updates.
//!
//! One iteration samples `n_x` pools; for each pool it runs one forward pass,
//! draws `n_a` selections and `n_y` outcome matrices, and accumulates
//! `(Û(a) − b)·(a_j − p_j)` into per-row coefficients so that a single
//! backward pass per pool yields the gradient. The `n_y` outcome draws of a
//! pool are shared by its selections, which keeps the estimator unbiased.
//! With [`BaselineMode::Mean`], `b` is the leave-one-out mean utility of the
//! other selections in the same pool (or of the other pools when `n_a = 1`).
//!
//! Fairness penalties enter pathwise through `p_i`: the ascent direction is
//! `∇U − w ∇P_overall` with `∂P/∂z_i = ∂P/∂p_i · p_i(1 − p_i)`.

use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{batch_emc, fairness_with_gradient, FairnessConfig};
use crate::policy::{Policy, PolicyKind, PROB_FLOOR};
use crate::rng::{SimRng, Stream};
use crate::sampling::{OutcomeSampler, PopulationSampler};
use crate::types::{ActionVector, OutcomeMatrix};
use crate::utility::{course_sums, Estimate, SampleCounts, UtilityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    None,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub eta: f64,
    pub iterations: usize,
    pub counts: SampleCounts,
    pub method: Method,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Weight `w` of `P_overall` in the loss `−U + w P_overall`.
    pub fairness_weight: f64,
    pub baseline: BaselineMode,
    /// Global-norm clip applied to each gradient before the step.
    pub clip_norm: f64,
}

impl OptimConfig {
    /// Plain gradient ascent with `η = 0.05`.
    pub fn sgd() -> Self {
        Self {
            eta: 0.05,
            iterations: 100,
            counts: SampleCounts::default(),
            method: Method::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            fairness_weight: 0.0,
            baseline: BaselineMode::None,
            clip_norm: 10.0,
        }
    }

    /// Adam with `η = 0.005`.
    pub fn adam() -> Self {
        Self {
            eta: 0.005,
            method: Method::Adam,
            ..Self::sgd()
        }
    }

    /// SGD for the logistic policy, Adam for the network.
    pub fn for_kind(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::Logistic => Self::sgd(),
            PolicyKind::Network => Self::adam(),
        }
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.eta)));
        }
        if !(self.fairness_weight >= 0.0 && self.fairness_weight.is_finite()) {
            return Err(Error::InvalidConfig("fairness weight must be non-negative".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("clip norm must be positive".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_epsilon > 0.0) {
            return Err(Error::InvalidConfig("adam hyperparameters out of range".into()));
        }
        self.counts.validated()?;
        Ok(self)
    }
}

/// Moments carried between Adam steps (unused by SGD).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient had a non-finite entry; parameters were left alone.
    Skipped,
}

/// One ascent step `θ' = θ + Δ` along `grad`.
pub fn step(params: &mut [f64], grad: &[f64], cfg: &OptimConfig, state: &mut OptimizerState) -> Result<StepOutcome> {
    crate::error::ensure_dims("gradient length", params.len(), grad.len())?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Ok(StepOutcome::Skipped);
    }
    match cfg.method {
        Method::Sgd => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p += cfg.eta * g;
            }
        }
        Method::Adam => {
            if state.m.len() != params.len() {
                state.m = vec![0.0; params.len()];
                state.v = vec![0.0; params.len()];
                state.t = 0;
            }
            state.t += 1;
            let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
            for i in 0..params.len() {
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let mh = state.m[i] / c1;
                let vh = state.v[i] / c2;
                params[i] += cfg.eta * mh / (vh.sqrt() + cfg.adam_epsilon);
            }
        }
    }
    Ok(StepOutcome::Applied)
}

/// The same update phrased as descent on the loss `L`, given `∇L = −grad`.
pub fn descent_step(params: &mut [f64], loss_grad: &[f64], cfg: &OptimConfig, state: &mut OptimizerState) -> Result<StepOutcome> {
    let ascent: Vec<f64> = loss_grad.iter().map(|g| -g).collect();
    step(params, &ascent, cfg, state)
}

pub fn global_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `v` in place so its norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm(v: &mut [f64], max_norm: f64) -> f64 {
    let n = global_norm(v);
    if n.is_finite() && n > max_norm {
        let s = max_norm / n;
        v.iter_mut().for_each(|x| *x *= s);
    }
    n
}

/// Batch-level statistics gathered while estimating a gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub utility: Estimate,
    /// Mean fraction of candidates selected across sampled selections.
    pub admission_rate: f64,
    pub p_dem: f64,
    pub p_eq: f64,
    pub p_overall: f64,
    /// Mean `p_i` per group (averaged over pools where the group appears).
    pub group_rates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Ascent direction of `U − w P_overall` (before clipping).
    pub grad: Vec<f64>,
    pub stats: BatchStats,
}

struct PoolRollout {
    x: crate::types::FeatureMatrix,
    pass: crate::policy::ForwardPass,
    actions: Vec<ActionVector>,
    utilities: Vec<f64>,
    /// `∂(−w P)/∂z_i`, present when a fairness weight is active.
    penalty_coeffs: Option<Vec<f64>>,
    penalty: Option<(f64, f64, f64, Vec<Option<f64>>)>,
}

/// Fairness inputs for [`estimate_gradient`].
#[derive(Debug, Clone, Copy)]
pub struct FairnessTerm<'a> {
    pub cfg: &'a FairnessConfig,
    pub weight: f64,
}

/// Unbiased estimate of `∇_θ U(π_θ, P)` (no fairness term).
pub fn estimate_policy_gradient(
    policy: &Policy,
    population: &dyn PopulationSampler,
    outcomes: &dyn OutcomeSampler,
    counts: SampleCounts,
    baseline: BaselineMode,
    ucfg: &UtilityConfig,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    Ok(estimate_gradient(policy, population, outcomes, counts, baseline, ucfg, None, false, rng)?.grad)
}

/// Full estimator: utility gradient, optional pathwise fairness gradient and
/// batch statistics. `dropout` enables training-mode forward passes.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gradient(
    policy: &Policy,
    population: &dyn PopulationSampler,
    outcomes: &dyn OutcomeSampler,
    counts: SampleCounts,
    baseline: BaselineMode,
    ucfg: &UtilityConfig,
    fairness: Option<FairnessTerm<'_>>,
    dropout: bool,
    rng: &mut SimRng,
) -> Result<GradientEstimate> {
    let counts = counts.validated()?;
    let seeds: Vec<u64> = (0..counts.n_x).map(|_| rng.random()).collect();
    let pools = seeds
        .par_iter()
        .map(|&seed| rollout_pool(policy, population, outcomes, counts, ucfg, fairness, dropout, seed))
        .collect::<Result<Vec<_>>>()?;
    // Baselines need every pool's utilities before any backward pass.
    let all: Vec<f64> = pools.iter().flat_map(|p| p.utilities.iter().copied()).collect();
    let total: f64 = all.iter().sum();
    let scale = 1.0 / (counts.n_x * counts.n_a) as f64;
    let per_pool = pools
        .par_iter()
        .map(|pool| {
            let pool_sum: f64 = pool.utilities.iter().sum();
            let p = pool.pass.probabilities().as_slice();
            let mut coeffs = match &pool.penalty_coeffs {
                Some(c) => c.iter().map(|v| v / counts.n_x as f64).collect(),
                None => vec![0.0; p.len()],
            };
            for (a, &u) in pool.actions.iter().zip(&pool.utilities) {
                let b = match baseline {
                    BaselineMode::None => 0.0,
                    BaselineMode::Mean if counts.n_a >= 2 => (pool_sum - u) / (counts.n_a - 1) as f64,
                    BaselineMode::Mean if counts.n_x >= 2 => (total - pool_sum) / (all.len() - counts.n_a) as f64,
                    BaselineMode::Mean => 0.0,
                };
                let w = (u - b) * scale;
                for (c, (&pj, &aj)) in coeffs.iter_mut().zip(p.iter().zip(a.as_slice())) {
                    *c += w * if aj { 1.0 - pj } else { -pj };
                }
            }
            policy.backward(&pool.x, &pool.pass, &coeffs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; policy.param_count()];
    for g in &per_pool {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let pool_means: Vec<f64> = pools
        .iter()
        .map(|p| p.utilities.iter().sum::<f64>() / counts.n_a as f64)
        .collect();
    let utility = if counts.n_x > 1 {
        let mut e = Estimate::from_samples(&pool_means);
        e.samples = all.len();
        e
    } else {
        Estimate::from_samples(&all)
    };
    let admission_rate = pools
        .iter()
        .map(|p| p.actions.iter().map(ActionVector::admission_rate).sum::<f64>() / counts.n_a as f64)
        .sum::<f64>()
        / pools.len() as f64;
    let mut stats = BatchStats {
        utility,
        admission_rate,
        p_dem: 0.0,
        p_eq: 0.0,
        p_overall: 0.0,
        group_rates: Vec::new(),
    };
    let penalties: Vec<_> = pools.iter().filter_map(|p| p.penalty.as_ref()).collect();
    if !penalties.is_empty() {
        let n = penalties.len() as f64;
        stats.p_dem = penalties.iter().map(|p| p.0).sum::<f64>() / n;
        stats.p_eq = penalties.iter().map(|p| p.1).sum::<f64>() / n;
        stats.p_overall = penalties.iter().map(|p| p.2).sum::<f64>() / n;
        let groups = penalties[0].3.len();
        stats.group_rates = (0..groups)
            .map(|g| {
                let seen: Vec<f64> = penalties.iter().filter_map(|p| p.3[g]).collect();
                (!seen.is_empty()).then(|| seen.iter().sum::<f64>() / seen.len() as f64)
            })
            .collect();
    }
    Ok(GradientEstimate { grad, stats })
}

#[allow(clippy::too_many_arguments)]
fn rollout_pool(
    policy: &Policy,
    population: &dyn PopulationSampler,
    outcomes: &dyn OutcomeSampler,
    counts: SampleCounts,
    ucfg: &UtilityConfig,
    fairness: Option<FairnessTerm<'_>>,
    dropout: bool,
    seed: u64,
) -> Result<PoolRollout> {
    let stream = Stream::root(seed);
    let mut rng = stream.named("pool").rng();
    let x = population.sample_population(&mut rng)?;
    let mut drop_rng = stream.named("dropout").rng();
    let pass = policy.forward(&x, dropout.then_some(&mut drop_rng))?;
    let p = pass.probabilities().clone();
    let actions: Vec<ActionVector> = (0..counts.n_a).map(|_| p.sample(&mut rng)).collect();
    let ys: Vec<OutcomeMatrix> = (0..counts.n_y)
        .map(|_| outcomes.sample_outcomes(&x, &mut rng))
        .collect::<Result<_>>()?;
    for y in &ys {
        crate::error::ensure_dims("outcome rows", x.rows(), y.rows())?;
        crate::error::ensure_dims("outcome courses", ucfg.courses, y.courses())?;
    }
    let utilities: Vec<f64> = actions
        .iter()
        .map(|a| {
            ys.iter()
                .map(|y| ucfg.from_sums(&course_sums(a, y), a.selected()))
                .sum::<f64>()
                / counts.n_y as f64
        })
        .collect();
    if utilities.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite("sampled utility"));
    }
    let (penalty, penalty_coeffs) = match fairness {
        Some(term) => {
            let pairs: Vec<(ActionVector, OutcomeMatrix)> = actions
                .iter()
                .flat_map(|a| ys.iter().map(move |y| (a.clone(), y.clone())))
                .collect();
            let emc = batch_emc(&pairs, ucfg)?;
            let (report, dp) = fairness_with_gradient(&p, x.groups(), x.group_count(), &emc, ucfg.cost, term.cfg)?;
            let coeffs = (term.weight > 0.0).then(|| {
                dp.iter()
                    .zip(p.as_slice())
                    .map(|(&d, &pi)| {
                        // The clamp is flat at the floors.
                        let slope = if pi <= PROB_FLOOR || pi >= 1.0 - PROB_FLOOR {
                            0.0
                        } else {
                            pi * (1.0 - pi)
                        };
                        -term.weight * d * slope
                    })
                    .collect()
            });
            (Some((report.p_dem, report.p_eq, report.p_overall, report.group_rates)), coeffs)
        }
        None => (None, None),
    };
    Ok(PoolRollout {
        x,
        pass,
        actions,
        utilities,
        penalty_coeffs,
        penalty,
    })
}

/// One row of a [`TrainingTrace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub utility: f64,
    pub utility_se: f64,
    /// Norm of the ascent direction before clipping.
    pub grad_norm: f64,
    pub admission_rate: f64,
    pub p_dem: f64,
    pub p_eq: f64,
    pub p_overall: f64,
    pub group_rates: Vec<Option<f64>>,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<IterationRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.utility).collect()
    }
}

/// Runs `cfg.iterations` of estimate → clip → step. Iteration `t` draws from
/// `stream.child(t)`, so a run is a pure function of its inputs.
#[allow(clippy::too_many_arguments)]
pub fn train(
    init: Policy,
    population: &dyn PopulationSampler,
    outcomes: &dyn OutcomeSampler,
    fairness: &FairnessConfig,
    cfg: &OptimConfig,
    ucfg: &UtilityConfig,
    stream: Stream,
) -> Result<(Policy, TrainingTrace)> {
    let cfg = cfg.validated()?;
    let mut policy = init;
    let mut params = policy.params();
    let mut state = OptimizerState::default();
    let mut trace = TrainingTrace::default();
    let term = FairnessTerm {
        cfg: fairness,
        weight: cfg.fairness_weight,
    };
    for t in 0..cfg.iterations {
        let mut rng = stream.child(t as u64).rng();
        let est = estimate_gradient(&policy, population, outcomes, cfg.counts, cfg.baseline, ucfg, Some(term), true, &mut rng)?;
        let mut grad = est.grad;
        let norm = clip_global_norm(&mut grad, cfg.clip_norm);
        let outcome = step(&mut params, &grad, &cfg, &mut state)?;
        if outcome == StepOutcome::Skipped {
            warn!("iteration {t}: non-finite gradient, step skipped");
        } else {
            policy.set_params(&params)?;
        }
        let s = est.stats;
        debug!("iteration {t}: utility {:.4} grad norm {:.3}", s.utility.mean, norm);
        trace.records.push(IterationRecord {
            iteration: t,
            utility: s.utility.mean,
            utility_se: s.utility.std_err,
            grad_norm: norm,
            admission_rate: s.admission_rate,
            p_dem: s.p_dem,
            p_eq: s.p_eq,
            p_overall: s.p_overall,
            group_rates: s.group_rates,
            skipped: outcome == StepOutcome::Skipped,
        });
    }
    Ok((policy, trace))
}
