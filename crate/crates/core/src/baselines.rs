//! Fixed comparison rules: GPA threshold, greedy top-m by predicted total,
//! the initial heuristic policy, and frozen copies of trained policies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::outcome_model::PosteriorState;
use crate::policy::{Policy, SelectionProbabilities};
use crate::types::{ActionVector, FeatureMatrix, OutcomeMatrix, OutcomeScale};

/// Default cut-off on the predicted mean raw GPA.
pub const DEFAULT_GPA_THRESHOLD: f64 = 2.5;

fn require_raw(predicted: &OutcomeMatrix) -> Result<()> {
    if predicted.scale() != OutcomeScale::Raw {
        return Err(Error::Schema("baselines expect raw-scale GPA predictions".into()));
    }
    Ok(())
}

/// Admits `i` iff the mean predicted GPA across courses exceeds `threshold`.
pub fn threshold_select(predicted: &OutcomeMatrix, threshold: f64) -> Result<ActionVector> {
    require_raw(predicted)?;
    Ok(ActionVector::new(predicted.row_means().into_iter().map(|m| m > threshold).collect()))
}

/// Admits the `m` candidates with the largest predicted total; ties go to the
/// lower index.
pub fn greedy_select(predicted: &OutcomeMatrix, m: usize) -> Result<ActionVector> {
    require_raw(predicted)?;
    let n = predicted.rows();
    if m > n {
        return Err(Error::SelectionTooLarge {
            requested: m,
            available: n,
        });
    }
    let totals = predicted.row_totals();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let mut a = ActionVector::zeros(n);
    for &i in &order[..m] {
        a.set(i, true);
    }
    Ok(a)
}

/// `π₀`: threshold rule on the outcome model's predicted means.
pub fn initial_policy_pi0(model: &PosteriorState, x: &FeatureMatrix, gpa_threshold: f64) -> Result<ActionVector> {
    threshold_select(&model.predict_mean(x)?, gpa_threshold)
}

/// A policy snapshot that is never updated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenPolicy(Policy);

impl FrozenPolicy {
    pub fn policy(&self) -> &Policy {
        &self.0
    }

    pub fn accept_prob(&self, x: &FeatureMatrix) -> Result<SelectionProbabilities> {
        self.0.accept_prob(x)
    }
}

pub fn freeze(policy: &Policy) -> FrozenPolicy {
    FrozenPolicy(policy.clone())
}
