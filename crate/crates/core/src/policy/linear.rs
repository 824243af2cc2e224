use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::types::{ActionVector, FeatureMatrix};

use super::clamp_prob;

/// `π(a_i = 1 | x_i) = σ(θᵀ[x_i, 1])`; the last weight is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    theta: Vec<f64>,
}

impl LinearPolicy {
    pub fn zeros(features: usize) -> Self {
        Self {
            theta: vec![0.0; features + 1],
        }
    }

    pub fn from_theta(theta: Vec<f64>) -> Result<Self> {
        if theta.len() < 2 {
            return Err(Error::InvalidConfig("linear policy needs at least one feature".into()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear policy parameters"));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn input_dim(&self) -> usize {
        self.theta.len() - 1
    }

    pub(crate) fn logit(&self, x: &[f64]) -> f64 {
        let d = self.input_dim();
        let dot: f64 = self.theta[..d].iter().zip(x).map(|(t, v)| t * v).sum();
        dot + self.theta[d]
    }

    pub(crate) fn logits(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        ensure_dims("linear policy input", self.input_dim(), x.cols())?;
        Ok((0..x.rows()).map(|i| self.logit(x.row(i))).collect())
    }

    /// `Σ_j coeff_j · ∂z_j/∂θ = Σ_j coeff_j · [x_j, 1]`.
    pub(crate) fn backward(&self, x: &FeatureMatrix, coeffs: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        let mut grad = vec![0.0; d + 1];
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (g, v) in grad[..d].iter_mut().zip(x.row(j)) {
                *g += c * v;
            }
            grad[d] += c;
        }
        grad
    }

    /// Score of the whole selection written out in the closed form
    /// `Σ_j x_j [1{a_j=1} π(a_j=0|x_j) − 1{a_j=0} π(a_j=1|x_j)]`.
    pub fn closed_form_log_prob_grad(&self, x: &FeatureMatrix, a: &ActionVector) -> Result<Vec<f64>> {
        ensure_dims("linear policy input", self.input_dim(), x.cols())?;
        ensure_dims("action length", x.rows(), a.len())?;
        let d = self.input_dim();
        let mut grad = vec![0.0; d + 1];
        for j in 0..x.rows() {
            let p1 = clamp_prob(super::sigmoid(self.logit(x.row(j))));
            let weight = if a.get(j) { 1.0 - p1 } else { -p1 };
            let row = x.row(j);
            for f in 0..d {
                grad[f] += row[f] * weight;
            }
            grad[d] += weight;
        }
        Ok(grad)
    }
}
