//! Sampler interfaces for applicant populations and course outcomes, plus the
//! simple fixed/resampling implementations used by tests and evaluation.

use rand::Rng;

use crate::error::{ensure_dims, Result};
use crate::rng::SimRng;
use crate::types::{FeatureMatrix, OutcomeMatrix, OutcomeScale};

/// Draws candidate pools `X ~ P(X)`.
pub trait PopulationSampler: Send + Sync {
    fn sample_population(&self, rng: &mut SimRng) -> Result<FeatureMatrix>;
}

/// Draws normalized outcomes `y ~ P(y | X)` for every row of a pool.
pub trait OutcomeSampler: Send + Sync {
    fn sample_outcomes(&self, x: &FeatureMatrix, rng: &mut SimRng) -> Result<OutcomeMatrix>;

    fn courses(&self) -> usize;
}

/// Always returns the same pool.
#[derive(Debug, Clone)]
pub struct FixedPopulation(pub FeatureMatrix);

impl PopulationSampler for FixedPopulation {
    fn sample_population(&self, _rng: &mut SimRng) -> Result<FeatureMatrix> {
        Ok(self.0.clone())
    }
}

/// Pools of `size` rows drawn with replacement from a finite table.
#[derive(Debug, Clone)]
pub struct ResamplePopulation {
    pub table: FeatureMatrix,
    pub size: usize,
}

impl ResamplePopulation {
    /// Row indices of one resampled pool; exposed so callers can pair rows
    /// with stored outcomes.
    pub fn sample_indices(&self, rng: &mut SimRng) -> Vec<usize> {
        let n = self.table.rows();
        (0..self.size).map(|_| rng.random_range(0..n)).collect()
    }
}

impl PopulationSampler for ResamplePopulation {
    fn sample_population(&self, rng: &mut SimRng) -> Result<FeatureMatrix> {
        let idx = self.sample_indices(rng);
        Ok(self.table.select_rows(&idx))
    }
}

/// Constant outcomes, independent of the pool (the pool must have matching rows).
#[derive(Debug, Clone)]
pub struct FixedOutcomes(pub OutcomeMatrix);

impl OutcomeSampler for FixedOutcomes {
    fn sample_outcomes(&self, x: &FeatureMatrix, _rng: &mut SimRng) -> Result<OutcomeMatrix> {
        ensure_dims("fixed outcomes rows", self.0.rows(), x.rows())?;
        Ok(self.0.normalized())
    }

    fn courses(&self) -> usize {
        self.0.courses()
    }
}

/// Picks one of several fixed outcome matrices with the given probabilities.
#[derive(Debug, Clone)]
pub struct DiscreteOutcomes {
    pub outcomes: Vec<OutcomeMatrix>,
    pub probabilities: Vec<f64>,
}

impl OutcomeSampler for DiscreteOutcomes {
    fn sample_outcomes(&self, x: &FeatureMatrix, rng: &mut SimRng) -> Result<OutcomeMatrix> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.outcomes.len() - 1;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        let y = &self.outcomes[pick];
        ensure_dims("discrete outcomes rows", y.rows(), x.rows())?;
        Ok(y.normalized())
    }

    fn courses(&self) -> usize {
        self.outcomes[0].courses()
    }
}

/// Row-wise outcomes computed by a closure of the features (no randomness).
pub struct FeatureOutcomes<F> {
    pub courses: usize,
    pub f: F,
}

impl<F> OutcomeSampler for FeatureOutcomes<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn sample_outcomes(&self, x: &FeatureMatrix, _rng: &mut SimRng) -> Result<OutcomeMatrix> {
        let mut values = Vec::with_capacity(x.rows() * self.courses);
        for i in 0..x.rows() {
            let y = (self.f)(x.row(i));
            ensure_dims("feature outcome width", self.courses, y.len())?;
            values.extend(y);
        }
        OutcomeMatrix::new(x.rows(), self.courses, values, OutcomeScale::Normalized)
    }

    fn courses(&self) -> usize {
        self.courses
    }
}
