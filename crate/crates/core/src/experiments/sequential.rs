//! Sequential setting: repeated admission cycles with refit applicant and
//! outcome models, Thompson-sampled outcome regressors and scheduled policy
//! retraining.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::Artifacts;
use super::one_shot::initial_policy;
use super::output::{Phase, TraceRow};
use super::plan::{BaselineKind, ExperimentPlan, Setting, UpdatePeriod};
use super::RunOutput;
use crate::baselines::{freeze, initial_policy_pi0, FrozenPolicy};
use crate::error::{Error, Result};
use crate::fairness::{batch_emc, fairness_report, FairnessReport};
use crate::optimizer::train;
use crate::policy::{Policy, PolicyKind, SelectionProbabilities};
use crate::population::{CandidateTable, ModelPopulation, PopulationModel};
use crate::rng::Stream;
use crate::types::{ActionVector, OutcomeMatrix, OutcomeScale};
use crate::utility::{utility, UtilityConfig};

/// A selection strategy followed through every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum SequentialMethod {
    /// Retrained on the schedule given by `period`.
    Adaptive { kind: PolicyKind, period: UpdatePeriod },
    /// Trained once after stage 1, then frozen.
    Static { kind: PolicyKind },
    /// The initial threshold rule on the stage-0 outcome model, forever.
    GpaThreshold,
}

impl SequentialMethod {
    pub fn name(&self) -> String {
        match self {
            SequentialMethod::Adaptive { kind, .. } => format!("adaptive_{}", kind.as_str()),
            SequentialMethod::Static { kind } => format!("static_{}", kind.as_str()),
            SequentialMethod::GpaThreshold => "gpa_threshold".into(),
        }
    }

    pub fn period(&self) -> Option<UpdatePeriod> {
        match self {
            SequentialMethod::Adaptive { period, .. } => Some(*period),
            _ => None,
        }
    }

    fn schedule(&self) -> Option<(PolicyKind, UpdatePeriod)> {
        match self {
            SequentialMethod::Adaptive { kind, period } => Some((*kind, *period)),
            SequentialMethod::Static { kind } => Some((*kind, UpdatePeriod::Never)),
            SequentialMethod::GpaThreshold => None,
        }
    }
}

/// Which models produced a stage's decision and what changed afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersions {
    /// Number of completed policy trainings when the selection was made
    /// (0: the initial threshold rule).
    pub policy_version: usize,
    /// Outcome rows the outcome model had absorbed when the selection was made.
    pub outcome_observations: usize,
    /// Rows the applicant model was fitted on when the selection was made.
    pub population_fit_rows: usize,
    /// Either model kept its previous version because the refit failed.
    pub refit_failed: bool,
    /// The policy was retrained after this stage.
    pub retrained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub method: String,
    pub cost: f64,
    pub update_period: Option<UpdatePeriod>,
    pub trial: usize,
    pub stage: usize,
    pub applicants: usize,
    pub actions: ActionVector,
    /// Raw course GPAs of admitted candidates, in candidate order.
    pub admitted_outcomes: Vec<Vec<f64>>,
    pub utility: f64,
    pub admission_rate: f64,
    pub fairness: FairnessReport,
    pub models: ModelVersions,
    pub ground_truth_hash: String,
}

impl StageRecord {
    pub fn trace_row(&self, batch_size: usize) -> TraceRow {
        TraceRow {
            setting: Setting::Sequential,
            method: self.method.clone(),
            cost: self.cost,
            batch_size,
            update_period: self.update_period,
            trial: self.trial,
            phase: Phase::Stage,
            step: self.stage,
            utility: self.utility,
            admission_rate: self.admission_rate,
            p_dem: self.fairness.p_dem,
            p_eq: self.fairness.p_eq,
            p_overall: self.fairness.p_overall,
            group_rates: self.fairness.group_rates.clone(),
            grad_norm: None,
            skipped: None,
        }
    }
}

enum Decider {
    Pi0,
    Live(Policy),
    Frozen(FrozenPolicy),
}

/// Runs one method for `plan.stages` cycles in one trial. Every random draw
/// that does not depend on earlier decisions (applicants, their potential
/// outcomes, selection uniforms) is shared by all methods of the trial.
pub fn run_chain(
    plan: &ExperimentPlan,
    art: &Artifacts,
    method: SequentialMethod,
    cost: f64,
    trial: usize,
    stream: Stream,
) -> Result<Vec<StageRecord>> {
    let gt = &art.ground_truth;
    let gt_hash = gt.state_hash();
    let ucfg = UtilityConfig::new(cost)?.with_epsilon(plan.epsilon_log)?;
    let fcfg = plan.fairness_config();
    let n = plan.pool_size;
    let stages = plan.stages;
    let group_count = art.preprocess.group_count();

    let mut history: CandidateTable = art.train.clone();
    let mut posterior = art.posterior.clone();
    let mut population: PopulationModel = art.population.clone();
    let mut decider = Decider::Pi0;
    let mut version = 0usize;
    let mut records = Vec::with_capacity(stages);

    for t in 1..=stages {
        let s = stream.named("stage").child(t as u64);
        let mut applicants = gt.simulate_applicants(n, &mut s.named("applicants").rng());
        let y_raw = gt.simulate_outcomes(&applicants, &mut s.named("outcomes").rng())?;
        let y = y_raw.normalized();
        let x = art.preprocess.transform_clipped(&applicants)?;

        let indicator = |a: &ActionVector| SelectionProbabilities::new(a.as_slice().iter().map(|&b| f64::from(u8::from(b))).collect());
        let (p, a, scored) = match &decider {
            Decider::Pi0 => {
                let model = if method == SequentialMethod::GpaThreshold { &art.posterior } else { &posterior };
                let a = initial_policy_pi0(model, &x, plan.gpa_threshold)?;
                (indicator(&a)?, a.clone(), vec![a])
            }
            Decider::Live(_) | Decider::Frozen(_) => {
                let p = match &decider {
                    Decider::Live(pol) => pol.accept_prob(&x)?,
                    Decider::Frozen(f) => f.accept_prob(&x)?,
                    Decider::Pi0 => unreachable!(),
                };
                let a = p.sample(&mut s.named("select").rng());
                let mut emc_rng = s.named("emc").rng();
                let mut scored = vec![a.clone()];
                scored.extend((1..plan.eval_actions).map(|_| p.sample(&mut emc_rng)));
                (p, a, scored)
            }
        };
        let realized = utility(&a, &y, &ucfg)?;
        let pairs: Vec<(ActionVector, OutcomeMatrix)> = scored.into_iter().map(|a| (a, y.clone())).collect();
        let emc = batch_emc(&pairs, &ucfg)?;
        let mut fairness = fairness_report(&p, x.groups(), group_count, &emc, cost, &fcfg)?;
        fairness.emc = None;

        let admitted = a.selected_indices();
        let admitted_outcomes: Vec<Vec<f64>> = admitted.iter().map(|&i| y_raw.row(i).to_vec()).collect();
        let mut models = ModelVersions {
            policy_version: version,
            outcome_observations: posterior.observations,
            population_fit_rows: population.fit_rows,
            refit_failed: false,
            retrained: false,
        };

        if let Some((kind, period)) = method.schedule() {
            for i in 0..applicants.rows() {
                applicants.set_admitted(i, Some(a.get(i)));
                if a.get(i) {
                    applicants.set_outcome(i, Some(y_raw.row(i).to_vec()))?;
                }
            }
            history.append(&applicants)?;
            let ya = OutcomeMatrix::new(admitted.len(), y_raw.courses(), admitted_outcomes.concat(), OutcomeScale::Raw)
                .unwrap_or_else(|_| OutcomeMatrix::empty(y_raw.courses(), OutcomeScale::Raw));
            match posterior.update(&x.select_rows(&admitted), &ya.normalized()) {
                Ok(next) => posterior = next,
                Err(e) => {
                    warn!("trial {trial} stage {t}: outcome refit failed ({e}); keeping previous model");
                    models.refit_failed = true;
                }
            }
            match PopulationModel::refit(&history, Some(&population)) {
                Ok((next, _)) => population = next,
                Err(e) => {
                    warn!("trial {trial} stage {t}: applicant refit failed ({e}); keeping previous model");
                    models.refit_failed = true;
                }
            }
            if period.retrains_after(t, stages) {
                let regressor = posterior.thompson_draw(&mut s.named("thompson").rng())?;
                let init = match (&decider, plan.warm_start) {
                    (Decider::Live(pol), true) => pol.clone(),
                    _ => initial_policy(kind, art.preprocess.feature_dim(), plan, stream.named("init").named(kind.as_str()))?,
                };
                let sampler = ModelPopulation {
                    model: population.clone(),
                    preprocess: art.preprocess.clone(),
                    size: n,
                };
                let (trained, trace) = train(
                    init,
                    &sampler,
                    &regressor,
                    &fcfg,
                    &plan.optim_config(kind),
                    &ucfg,
                    s.named("train").named(kind.as_str()),
                )?;
                version += 1;
                models.retrained = true;
                decider = if period == UpdatePeriod::Never {
                    Decider::Frozen(freeze(&trained))
                } else {
                    Decider::Live(trained)
                };
                info!(
                    "trial {trial} {} c={cost} stage {t}: retrained (final model utility {:.4})",
                    method.name(),
                    trace.records.last().map_or(f64::NAN, |r| r.utility)
                );
            }
        }
        info!(
            "trial {trial} {} c={cost} stage {t}: utility {realized:.4}, admitted {}/{n}",
            method.name(),
            admitted.len()
        );
        records.push(StageRecord {
            method: method.name(),
            cost,
            update_period: method.period(),
            trial,
            stage: t,
            applicants: n,
            admission_rate: a.admission_rate(),
            actions: a,
            admitted_outcomes,
            utility: realized,
            fairness,
            models,
            ground_truth_hash: gt_hash.clone(),
        });
    }
    Ok(records)
}

/// Methods of a plan, in the order they appear in traces.
pub fn plan_methods(plan: &ExperimentPlan) -> Vec<SequentialMethod> {
    let mut out = Vec::new();
    for &kind in &plan.policies {
        for &period in &plan.update_periods {
            out.push(SequentialMethod::Adaptive { kind, period });
        }
    }
    for &b in &plan.baselines {
        match b {
            BaselineKind::Threshold => out.push(SequentialMethod::GpaThreshold),
            BaselineKind::StaticNetwork => out.push(SequentialMethod::Static { kind: PolicyKind::Network }),
            BaselineKind::StaticLogistic => out.push(SequentialMethod::Static { kind: PolicyKind::Logistic }),
            BaselineKind::Greedy => {}
        }
    }
    out
}

/// Every `(cost, method)` chain of every trial. Trials and chains run in
/// parallel; each chain's stages run in order.
pub fn run_sequential(plan: &ExperimentPlan, art: &Artifacts, on_trial: &(dyn Fn(usize, &[TraceRow]) + Sync)) -> Result<RunOutput> {
    let plan = plan.clone().validated()?;
    if plan.setting != Setting::Sequential {
        return Err(Error::InvalidConfig("run_sequential needs a sequential plan".into()));
    }
    let methods = plan_methods(&plan);
    let chains: Vec<(f64, SequentialMethod)> = plan.costs.iter().flat_map(|&c| methods.iter().map(move |&m| (c, m))).collect();
    let streams: Vec<Stream> = (0..plan.trials).map(|t| super::trial_stream(plan.seed, t)).collect();
    let per_trial: Vec<Vec<StageRecord>> = streams
        .par_iter()
        .enumerate()
        .map(|(trial, &s)| {
            let records: Vec<StageRecord> = chains
                .par_iter()
                .map(|&(cost, m)| run_chain(&plan, art, m, cost, trial, s))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .flatten()
                .collect();
            let rows: Vec<TraceRow> = records.iter().map(|r| r.trace_row(plan.pool_size)).collect();
            on_trial(trial, &rows);
            Ok(records)
        })
        .collect::<Result<Vec<_>>>()?;
    let stages: Vec<StageRecord> = per_trial.into_iter().flatten().collect();
    Ok(RunOutput {
        rows: stages.iter().map(|r| r.trace_row(plan.pool_size)).collect(),
        stages,
        trial_seeds: streams.iter().map(|s| s.seed()).collect(),
        failures: Vec::new(),
    })
}
