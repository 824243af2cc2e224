//! One-shot setting: train on pools from the stage-0 models, then evaluate on
//! held-out batches with known outcomes.

use log::{info, warn};
use rayon::prelude::*;

use super::artifacts::Artifacts;
use super::output::{Phase, TraceRow};
use super::plan::{BaselineKind, ExperimentPlan, Setting};
use super::RunOutput;
use crate::baselines::{greedy_select, threshold_select};
use crate::error::{Error, Result};
use crate::fairness::{batch_emc, fairness_report, FairnessConfig};
use crate::optimizer::{train, TrainingTrace};
use crate::outcome_model::PosteriorState;
use crate::policy::{LinearPolicy, MlpPolicy, Policy, PolicyKind, SelectionProbabilities};
use crate::population::ModelPopulation;
use crate::rng::{SimRng, Stream};
use crate::sampling::ResamplePopulation;
use crate::types::{ActionVector, FeatureMatrix, OutcomeMatrix};
use crate::utility::{utility, UtilityConfig};

/// A fresh, untrained policy of `kind`.
pub fn initial_policy(kind: PolicyKind, features: usize, plan: &ExperimentPlan, stream: Stream) -> Result<Policy> {
    Ok(match kind {
        PolicyKind::Logistic => Policy::Linear(LinearPolicy::zeros(features)),
        PolicyKind::Network => Policy::Mlp(MlpPolicy::new(
            features,
            plan.network.widths,
            plan.network.dropout,
            &mut stream.rng(),
        )?),
    })
}

/// How a method turns a batch into selections.
pub enum Selector<'a> {
    Policy(&'a Policy),
    Threshold { model: &'a PosteriorState, threshold: f64 },
    Greedy { model: &'a PosteriorState, threshold: f64 },
}

impl Selector<'_> {
    /// Acceptance probabilities and the selections to score.
    fn select(&self, x: &FeatureMatrix, draws: usize, rng: &mut SimRng) -> Result<(SelectionProbabilities, Vec<ActionVector>)> {
        let deterministic = |a: ActionVector| -> Result<(SelectionProbabilities, Vec<ActionVector>)> {
            let p = SelectionProbabilities::new(a.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?;
            Ok((p, vec![a]))
        };
        match self {
            Selector::Policy(policy) => {
                let p = policy.accept_prob(x)?;
                let actions = (0..draws).map(|_| p.sample(rng)).collect();
                Ok((p, actions))
            }
            Selector::Threshold { model, threshold } => deterministic(threshold_select(&model.predict_mean(x)?, *threshold)?),
            Selector::Greedy { model, threshold } => {
                let predicted = model.predict_mean(x)?;
                let m = threshold_select(&predicted, *threshold)?.selected();
                deterministic(greedy_select(&predicted, m)?)
            }
        }
    }
}

/// Batch-averaged evaluation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub utility: f64,
    pub admission_rate: f64,
    pub p_dem: f64,
    pub p_eq: f64,
    pub p_overall: f64,
    pub group_rates: Vec<Option<f64>>,
}

/// Scores one selection rule on a batch whose outcomes are known. EMC for
/// the opportunity penalty is averaged over the scored selections.
pub fn evaluate_batch(
    selector: &Selector<'_>,
    x: &FeatureMatrix,
    y: &OutcomeMatrix,
    draws: usize,
    ucfg: &UtilityConfig,
    fcfg: &FairnessConfig,
    rng: &mut SimRng,
) -> Result<Evaluation> {
    let (p, actions) = selector.select(x, draws, rng)?;
    let mut total = 0.0;
    let mut rate = 0.0;
    for a in &actions {
        total += utility(a, y, ucfg)?;
        rate += a.admission_rate();
    }
    let m = actions.len() as f64;
    let pairs: Vec<(ActionVector, OutcomeMatrix)> = actions.into_iter().map(|a| (a, y.clone())).collect();
    let emc = batch_emc(&pairs, ucfg)?;
    let report = fairness_report(&p, x.groups(), x.group_count(), &emc, ucfg.cost, fcfg)?;
    Ok(Evaluation {
        utility: total / m,
        admission_rate: rate / m,
        p_dem: report.p_dem,
        p_eq: report.p_eq,
        p_overall: report.p_overall,
        group_rates: report.group_rates,
    })
}

/// Averages [`evaluate_batch`] over `batches` resampled test batches. The
/// batch indices depend only on `stream`, so every method sees the same batches.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_on_test(
    selector: &Selector<'_>,
    test_x: &FeatureMatrix,
    test_y: &OutcomeMatrix,
    batch_size: usize,
    batches: usize,
    draws: usize,
    ucfg: &UtilityConfig,
    fcfg: &FairnessConfig,
    stream: Stream,
) -> Result<Evaluation> {
    if test_x.rows() == 0 {
        return Err(Error::InvalidConfig("test split has no rows with outcomes".into()));
    }
    let sampler = ResamplePopulation {
        table: test_x.clone(),
        size: batch_size,
    };
    let gc = test_x.group_count();
    let mut acc = Evaluation {
        utility: 0.0,
        admission_rate: 0.0,
        p_dem: 0.0,
        p_eq: 0.0,
        p_overall: 0.0,
        group_rates: vec![None; gc],
    };
    let mut rate_sums = vec![(0.0, 0usize); gc];
    for b in 0..batches {
        let s = stream.child(b as u64);
        let idx = sampler.sample_indices(&mut s.named("rows").rng());
        let x = test_x.select_rows(&idx);
        let y = test_y.select_rows(&idx);
        let e = evaluate_batch(selector, &x, &y, draws, ucfg, fcfg, &mut s.named("select").rng())?;
        acc.utility += e.utility;
        acc.admission_rate += e.admission_rate;
        acc.p_dem += e.p_dem;
        acc.p_eq += e.p_eq;
        acc.p_overall += e.p_overall;
        for (slot, r) in rate_sums.iter_mut().zip(&e.group_rates) {
            if let Some(r) = r {
                slot.0 += r;
                slot.1 += 1;
            }
        }
    }
    let m = batches as f64;
    acc.utility /= m;
    acc.admission_rate /= m;
    acc.p_dem /= m;
    acc.p_eq /= m;
    acc.p_overall /= m;
    acc.group_rates = rate_sums.into_iter().map(|(s, c)| (c > 0).then(|| s / c as f64)).collect();
    Ok(acc)
}

struct Cell {
    setting: Setting,
    method: String,
    cost: f64,
    batch_size: usize,
    trial: usize,
}

impl Cell {
    fn row(&self, phase: Phase, step: usize) -> TraceRow {
        TraceRow {
            setting: self.setting,
            method: self.method.clone(),
            cost: self.cost,
            batch_size: self.batch_size,
            update_period: None,
            trial: self.trial,
            phase,
            step,
            utility: 0.0,
            admission_rate: 0.0,
            p_dem: 0.0,
            p_eq: 0.0,
            p_overall: 0.0,
            group_rates: Vec::new(),
            grad_norm: None,
            skipped: None,
        }
    }

    fn train_rows(&self, trace: &TrainingTrace) -> Vec<TraceRow> {
        trace
            .records
            .iter()
            .map(|r| TraceRow {
                utility: r.utility,
                admission_rate: r.admission_rate,
                p_dem: r.p_dem,
                p_eq: r.p_eq,
                p_overall: r.p_overall,
                group_rates: r.group_rates.clone(),
                grad_norm: Some(r.grad_norm),
                skipped: Some(r.skipped),
                ..self.row(Phase::Train, r.iteration)
            })
            .collect()
    }

    fn eval_row(&self, step: usize, e: Evaluation) -> TraceRow {
        TraceRow {
            utility: e.utility,
            admission_rate: e.admission_rate,
            p_dem: e.p_dem,
            p_eq: e.p_eq,
            p_overall: e.p_overall,
            group_rates: e.group_rates,
            ..self.row(Phase::Eval, step)
        }
    }
}

/// Result of one trained one-shot cell, kept for callers that need the policy.
pub struct TrainedCell {
    pub kind: PolicyKind,
    pub cost: f64,
    pub batch_size: usize,
    pub policy: Policy,
    pub trace: TrainingTrace,
    pub evaluation: Evaluation,
}

/// Every cell of one trial, in plan order.
fn run_trial(plan: &ExperimentPlan, art: &Artifacts, trial: usize, stream: Stream) -> (Vec<TraceRow>, Vec<String>) {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let (test_x, test_y) = match art.test_set() {
        Ok(t) => t,
        Err(e) => return (rows, vec![format!("trial {trial}: {e}")]),
    };
    let fcfg = plan.fairness_config();
    for &b in &plan.batch_sizes {
        let eval_stream = stream.named("eval").child(b as u64);
        for &cost in &plan.costs {
            let ucfg = match UtilityConfig::new(cost).and_then(|u| u.with_epsilon(plan.epsilon_log)) {
                Ok(u) => u,
                Err(e) => {
                    failures.push(format!("cost {cost}: {e}"));
                    continue;
                }
            };
            for &kind in &plan.policies {
                let cell = Cell {
                    setting: Setting::OneShot,
                    method: kind.as_str().to_string(),
                    cost,
                    batch_size: b,
                    trial,
                };
                let result = train_cell(plan, art, kind, cost, b, trial).map(|c| (c.trace, c.evaluation));
                match result {
                    Ok((trace, e)) => {
                        info!(
                            "trial {trial} {} c={cost} b={b}: final train utility {:.4}, test utility {:.4}",
                            kind.as_str(),
                            trace.records.last().map_or(f64::NAN, |r| r.utility),
                            e.utility
                        );
                        rows.extend(cell.train_rows(&trace));
                        rows.push(cell.eval_row(plan.iterations, e));
                    }
                    Err(e) => {
                        warn!("trial {trial} {} c={cost} b={b} failed: {e}", kind.as_str());
                        failures.push(format!("trial {trial} {} c={cost} b={b}: {e}", kind.as_str()));
                    }
                }
            }
            for &base in &plan.baselines {
                let (name, selector) = match base {
                    BaselineKind::Threshold => (
                        "threshold",
                        Selector::Threshold {
                            model: &art.posterior,
                            threshold: plan.gpa_threshold,
                        },
                    ),
                    BaselineKind::Greedy => (
                        "greedy",
                        Selector::Greedy {
                            model: &art.posterior,
                            threshold: plan.gpa_threshold,
                        },
                    ),
                    BaselineKind::StaticNetwork | BaselineKind::StaticLogistic => continue,
                };
                let cell = Cell {
                    setting: Setting::OneShot,
                    method: name.to_string(),
                    cost,
                    batch_size: b,
                    trial,
                };
                match evaluate_on_test(&selector, &test_x, &test_y, b, plan.eval_batches, plan.eval_actions, &ucfg, &fcfg, eval_stream)
                {
                    Ok(e) => rows.push(cell.eval_row(plan.iterations, e)),
                    Err(e) => failures.push(format!("trial {trial} {name} c={cost} b={b}: {e}")),
                }
            }
        }
    }
    (rows, failures)
}

/// Runs every `(batch size, cost, method)` cell for every trial. Cell errors
/// are logged and collected; the sweep continues.
pub fn run_one_shot(plan: &ExperimentPlan, art: &Artifacts, on_trial: &(dyn Fn(usize, &[TraceRow]) + Sync)) -> Result<RunOutput> {
    let plan = plan.clone().validated()?;
    if plan.setting != Setting::OneShot {
        return Err(Error::InvalidConfig("run_one_shot needs a one_shot plan".into()));
    }
    let streams: Vec<Stream> = (0..plan.trials).map(|t| super::trial_stream(plan.seed, t)).collect();
    let per_trial: Vec<(Vec<TraceRow>, Vec<String>)> = streams
        .par_iter()
        .enumerate()
        .map(|(t, &s)| {
            let out = run_trial(&plan, art, t, s);
            on_trial(t, &out.0);
            out
        })
        .collect();
    let mut out = RunOutput {
        trial_seeds: streams.iter().map(|s| s.seed()).collect(),
        ..RunOutput::default()
    };
    for (rows, failures) in per_trial {
        out.rows.extend(rows);
        out.failures.extend(failures);
    }
    Ok(out)
}

/// Trains a single one-shot cell; used by tests and by callers that need
/// the trained policy rather than trace rows.
pub fn train_cell(
    plan: &ExperimentPlan,
    art: &Artifacts,
    kind: PolicyKind,
    cost: f64,
    batch_size: usize,
    trial: usize,
) -> Result<TrainedCell> {
    let stream = super::trial_stream(plan.seed, trial);
    let (test_x, test_y) = art.test_set()?;
    let ucfg = UtilityConfig::new(cost)?.with_epsilon(plan.epsilon_log)?;
    let fcfg = plan.fairness_config();
    let population = ModelPopulation {
        model: art.population.clone(),
        preprocess: art.preprocess.clone(),
        size: batch_size,
    };
    let init = initial_policy(kind, art.preprocess.feature_dim(), plan, stream.named("init").named(kind.as_str()))?;
    let (policy, trace) = train(
        init,
        &population,
        &art.posterior,
        &fcfg,
        &plan.optim_config(kind),
        &ucfg,
        stream.named("train").child(batch_size as u64),
    )?;
    let evaluation = evaluate_on_test(
        &Selector::Policy(&policy),
        &test_x,
        &test_y,
        batch_size,
        plan.eval_batches,
        plan.eval_actions,
        &ucfg,
        &fcfg,
        stream.named("eval").child(batch_size as u64),
    )?;
    Ok(TrainedCell {
        kind,
        cost,
        batch_size,
        policy,
        trace,
        evaluation,
    })
}
