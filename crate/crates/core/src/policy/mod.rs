//! Stochastic selection policies `π(a|X) = Π_i π(a_i | x_i)`.
//!
//! Every policy maps a candidate's features to an acceptance logit `z_i`;
//! acceptance probabilities are `σ(z_i)` clamped to `[1e-7, 1 − 1e-7]`, and
//! actions are independent Bernoulli draws. Gradients are expressed through a
//! single primitive, [`Policy::backward`], which accumulates
//! `Σ_j coeff_j ∂z_j/∂θ`; the score of a selection uses `coeff_j = a_j − p_j`.

mod linear;
mod mlp;

pub use linear::LinearPolicy;
pub use mlp::{Dense, MlpPolicy};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::rng::SimRng;
use crate::types::{ActionVector, FeatureMatrix};

/// Probabilities are kept inside `[PROB_FLOOR, 1 − PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-7;

/// Increasing logistic function `e^z / (1 + e^z)`, evaluated stably.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Per-candidate acceptance probabilities `p_i = π(a_i = 1 | x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProbabilities(Vec<f64>);

impl SelectionProbabilities {
    /// Clamps into the open unit interval.
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(logits.iter().map(|&z| clamp_prob(sigmoid(z))).collect())
    }

    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("selection probabilities"));
        }
        Ok(Self(p.into_iter().map(clamp_prob).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }

    /// Independent Bernoulli draw per candidate, in row order.
    pub fn sample(&self, rng: &mut SimRng) -> ActionVector {
        ActionVector::new(self.0.iter().map(|&p| rng.random::<f64>() < p).collect())
    }

    /// `Σ_j log π(a_j | x_j)`.
    pub fn log_prob(&self, a: &ActionVector) -> f64 {
        self.0
            .iter()
            .zip(a.as_slice())
            .map(|(&p, &ai)| if ai { p.ln() } else { (1.0 - p).ln() })
            .sum()
    }

    /// Exact `π(a | X)`.
    pub fn prob(&self, a: &ActionVector) -> f64 {
        self.0
            .iter()
            .zip(a.as_slice())
            .map(|(&p, &ai)| if ai { p } else { 1.0 - p })
            .product()
    }
}

/// Either policy family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Linear(LinearPolicy),
    Mlp(MlpPolicy),
}

/// Activations of one forward pass, kept for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    probs: SelectionProbabilities,
    cache: Option<mlp::MlpCache>,
}

impl ForwardPass {
    pub fn probabilities(&self) -> &SelectionProbabilities {
        &self.probs
    }
}

/// Short name used in traces and manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Logistic,
    Network,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Logistic => "logistic",
            PolicyKind::Network => "network",
        }
    }
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Linear(_) => PolicyKind::Logistic,
            Policy::Mlp(_) => PolicyKind::Network,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Policy::Linear(p) => p.input_dim(),
            Policy::Mlp(p) => p.input_dim(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Policy::Linear(p) => p.theta().len(),
            Policy::Mlp(p) => p.param_count(),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            Policy::Linear(p) => p.theta().to_vec(),
            Policy::Mlp(p) => p.params(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            Policy::Linear(p) => {
                ensure_dims("linear parameter vector", p.theta().len(), params.len())?;
                if params.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("linear policy parameters"));
                }
                p.theta_mut().copy_from_slice(params);
                Ok(())
            }
            Policy::Mlp(p) => p.set_params(params),
        }
    }

    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(params)?;
        Ok(out)
    }

    /// Inference-mode logits `z_i` (dropout off).
    pub fn logits(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        match self {
            Policy::Linear(p) => p.logits(x),
            Policy::Mlp(p) => Ok(p.forward(x, None)?.logits),
        }
    }

    /// `p_i = π(a_i = 1 | x_i)` in inference mode.
    pub fn accept_prob(&self, x: &FeatureMatrix) -> Result<SelectionProbabilities> {
        Ok(SelectionProbabilities::from_logits(&self.logits(x)?))
    }

    pub fn sample_actions(&self, x: &FeatureMatrix, rng: &mut SimRng) -> Result<ActionVector> {
        Ok(self.accept_prob(x)?.sample(rng))
    }

    /// Forward pass retaining activations. `dropout_rng` switches the network
    /// into training mode; the linear policy ignores it.
    pub fn forward(&self, x: &FeatureMatrix, dropout_rng: Option<&mut SimRng>) -> Result<ForwardPass> {
        match self {
            Policy::Linear(p) => Ok(ForwardPass {
                probs: SelectionProbabilities::from_logits(&p.logits(x)?),
                cache: None,
            }),
            Policy::Mlp(p) => {
                let cache = p.forward(x, dropout_rng)?;
                Ok(ForwardPass {
                    probs: SelectionProbabilities::from_logits(&cache.logits),
                    cache: Some(cache),
                })
            }
        }
    }

    /// `Σ_j coeff_j · ∂z_j/∂θ` for the rows of `x` seen by `pass`.
    pub fn backward(&self, x: &FeatureMatrix, pass: &ForwardPass, coeffs: &[f64]) -> Result<Vec<f64>> {
        ensure_dims("backward coefficients", x.rows(), coeffs.len())?;
        match (self, &pass.cache) {
            (Policy::Linear(p), _) => Ok(p.backward(x, coeffs)),
            (Policy::Mlp(p), Some(cache)) => Ok(p.backward(x, cache, coeffs)),
            (Policy::Mlp(_), None) => Err(Error::InvalidConfig("network backward pass needs a network forward pass".into())),
        }
    }

    /// `∇_θ Σ_j log π_θ(a_j | x_j)` in inference mode.
    pub fn log_prob_grad(&self, x: &FeatureMatrix, a: &ActionVector) -> Result<Vec<f64>> {
        ensure_dims("action length", x.rows(), a.len())?;
        let pass = self.forward(x, None)?;
        let coeffs = score_coefficients(pass.probabilities(), a);
        self.backward(x, &pass, &coeffs)
    }

    pub fn to_document(&self) -> PolicyDocument {
        PolicyDocument {
            format_version: PolicyDocument::VERSION,
            policy: self.clone(),
        }
    }
}

/// `∂ log π(a_j | x_j) / ∂z_j = a_j − p_j`.
pub fn score_coefficients(p: &SelectionProbabilities, a: &ActionVector) -> Vec<f64> {
    p.as_slice()
        .iter()
        .zip(a.as_slice())
        .map(|(&pj, &aj)| if aj { 1.0 - pj } else { -pj })
        .collect()
}

/// Versioned on-disk form of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub format_version: u32,
    pub policy: Policy,
}

impl PolicyDocument {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Policy> {
        let doc: PolicyDocument = serde_json::from_str(text)?;
        if doc.format_version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: doc.format_version,
            });
        }
        // Re-validate shapes that serde cannot check.
        match doc.policy {
            Policy::Linear(p) => Ok(Policy::Linear(LinearPolicy::from_theta(p.theta().to_vec())?)),
            Policy::Mlp(p) => {
                let layers = p.layers().clone();
                Ok(Policy::Mlp(MlpPolicy::from_layers(p.input_dim(), p.dropout(), layers)?))
            }
        }
    }
}
