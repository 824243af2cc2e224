//! Gaussian-copula applicant model `P_t(x)`.
//!
//! Numeric columns keep an empirical quantile table; categorical columns keep
//! level frequencies. Both are tied together through the correlation of their
//! normal scores: a numeric value maps to `Φ⁻¹` of its mid-rank, a categorical
//! level to `Φ⁻¹` of the middle of its cumulative-frequency interval. Sampling
//! reverses the construction.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::sampling::PopulationSampler;
use crate::types::FeatureMatrix;

use super::preprocess::PreprocessState;
use super::schema::{CandidateSchema, CandidateTable};

/// Fewer rows than this and a refit keeps the previous model.
pub const MIN_FIT_ROWS: usize = 30;

/// Number of intervals in each quantile table.
const QUANTILE_INTERVALS: usize = 200;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Quantiles at probabilities `0, 1/m, …, 1`; the fitted marginal is the
/// piecewise-linear distribution through them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub values: Vec<f64>,
}

impl QuantileTable {
    fn fit(mut col: Vec<f64>) -> Self {
        col.sort_by(f64::total_cmp);
        let n = col.len();
        let values = (0..=QUANTILE_INTERVALS)
            .map(|q| {
                let h = (n - 1) as f64 * q as f64 / QUANTILE_INTERVALS as f64;
                let lo = h.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                col[lo] + (h - lo as f64) * (col[hi] - col[lo])
            })
            .collect();
        Self { values }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let m = self.values.len() - 1;
        let h = u.clamp(0.0, 1.0) * m as f64;
        let lo = (h.floor() as usize).min(m - 1);
        let t = h - lo as f64;
        self.values[lo] + t * (self.values[lo + 1] - self.values[lo])
    }

    /// CDF of the piecewise-linear marginal.
    pub fn cdf(&self, v: f64) -> f64 {
        let m = self.values.len() - 1;
        if v < self.values[0] {
            return 0.0;
        }
        if v >= self.values[m] {
            return 1.0;
        }
        // Last knot not above v; flat stretches resolve to their right end.
        let k = self.values.partition_point(|&q| q <= v) - 1;
        let (a, b) = (self.values[k], self.values[k + 1]);
        let t = if b > a { (v - a) / (b - a) } else { 1.0 };
        (k as f64 + t) / m as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub format_version: u32,
    pub schema: CandidateSchema,
    pub marginals: Vec<QuantileTable>,
    /// Per categorical column, frequency of every schema level.
    pub frequencies: Vec<Vec<f64>>,
    /// Row-major correlation of normal scores over numeric then categorical columns.
    pub correlation: Vec<f64>,
    pub fit_rows: usize,
}

impl PopulationModel {
    pub const VERSION: u32 = 1;

    /// Fits on every row of `history` (admitted or not).
    pub fn fit(history: &CandidateTable) -> Result<Self> {
        let n = history.rows();
        if n < MIN_FIT_ROWS {
            return Err(Error::InvalidConfig(format!(
                "population model needs at least {MIN_FIT_ROWS} rows, got {n}"
            )));
        }
        let schema = history.schema.clone();
        let normal = std_normal();
        let mut scores: Vec<Vec<f64>> = Vec::new();
        let mut marginals = Vec::new();
        for j in 0..schema.numeric.len() {
            let col = history.numeric_column(j);
            scores.push(mid_ranks(&col).iter().map(|r| normal.inverse_cdf(r / (n as f64 + 1.0))).collect());
            marginals.push(QuantileTable::fit(col));
        }
        let mut frequencies = Vec::new();
        for (j, f) in schema.categorical.iter().enumerate() {
            let col = history.categorical_column(j);
            let mut freq = vec![0.0; f.levels.len()];
            for &l in &col {
                freq[l as usize] += 1.0;
            }
            freq.iter_mut().for_each(|v| *v /= n as f64);
            let mids = interval_midpoints(&freq);
            scores.push(col.iter().map(|&l| normal.inverse_cdf(mids[l as usize])).collect());
            frequencies.push(freq);
        }
        let names: Vec<&str> = schema
            .numeric
            .iter()
            .map(|f| f.name.as_str())
            .chain(schema.categorical.iter().map(|f| f.name.as_str()))
            .collect();
        let correlation = score_correlation(&scores, &names);
        Ok(Self {
            format_version: Self::VERSION,
            schema,
            marginals,
            frequencies,
            correlation,
            fit_rows: n,
        })
    }

    /// Refit on the full history; with too few rows the previous model is kept.
    pub fn refit(history: &CandidateTable, previous: Option<&Self>) -> Result<(Self, bool)> {
        match (history.rows() < MIN_FIT_ROWS, previous) {
            (true, Some(prev)) => {
                warn!("only {} rows in history; keeping the previous applicant model", history.rows());
                Ok((prev.clone(), false))
            }
            _ => Ok((Self::fit(history)?, true)),
        }
    }

    pub fn dim(&self) -> usize {
        self.marginals.len() + self.frequencies.len()
    }

    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.correlation)
    }

    /// Raw candidates drawn from the model, without labels or outcomes.
    pub fn sample(&self, n: usize, rng: &mut SimRng) -> Result<CandidateTable> {
        let m = self.dim();
        let l = correlation_factor(self.correlation_matrix())?;
        let normal = std_normal();
        let cumulative: Vec<Vec<f64>> = self
            .frequencies
            .iter()
            .map(|f| {
                f.iter()
                    .scan(0.0, |acc, p| {
                        *acc += p;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        let mut table = CandidateTable::empty(self.schema.clone());
        let nn = self.marginals.len();
        let mut nums = vec![0.0; nn];
        let mut cats = vec![0u32; self.frequencies.len()];
        for _ in 0..n {
            let g = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let z = &l * g;
            for j in 0..nn {
                nums[j] = self.marginals[j].quantile(normal.cdf(z[j]));
            }
            for (c, cum) in cumulative.iter().enumerate() {
                let u = normal.cdf(z[nn + c]);
                let last = cum.len() - 1;
                cats[c] = cum.iter().position(|&f| u < f).unwrap_or(last).min(last) as u32;
                // Never emit a level the model has never seen.
                while self.frequencies[c][cats[c] as usize] == 0.0 && cats[c] > 0 {
                    cats[c] -= 1;
                }
            }
            table.push(&nums, &cats, None, None)?;
        }
        Ok(table)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.format_version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: s.format_version,
            });
        }
        if s.correlation.len() != s.dim() * s.dim() || s.marginals.iter().any(|q| q.values.len() < 2) {
            return Err(Error::Schema("population model shapes are inconsistent".into()));
        }
        Ok(s)
    }
}

/// 1-based ranks with ties sharing their average rank.
fn mid_ranks(col: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let mut ranks = vec![0.0; col.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && col[order[j + 1]] == col[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn interval_midpoints(freq: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    freq.iter()
        .map(|&p| {
            let mid = acc + p / 2.0;
            acc += p;
            mid.clamp(1e-12, 1.0 - 1e-12)
        })
        .collect()
}

fn score_correlation(scores: &[Vec<f64>], names: &[&str]) -> Vec<f64> {
    let m = scores.len();
    let n = scores.first().map_or(0, Vec::len) as f64;
    let centred: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| {
            let mean = s.iter().sum::<f64>() / n;
            s.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    for (j, &nrm) in norms.iter().enumerate() {
        if nrm < 1e-12 {
            warn!("column {} is constant; its correlations are set to 0", names[j]);
        }
    }
    let mut out = vec![0.0; m * m];
    for a in 0..m {
        out[a * m + a] = 1.0;
        for b in (a + 1)..m {
            let r = if norms[a] < 1e-12 || norms[b] < 1e-12 {
                0.0
            } else {
                let dot: f64 = centred[a].iter().zip(&centred[b]).map(|(x, y)| x * y).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            out[a * m + b] = r;
            out[b * m + a] = r;
        }
    }
    out
}

/// Lower factor of a correlation matrix; near-singular matrices have their
/// eigenvalues floored and their diagonal restored to 1 first.
fn correlation_factor(r: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation matrix"));
    }
    if let Some(c) = Cholesky::new(r.clone()) {
        return Ok(c.l());
    }
    let eig = SymmetricEigen::new(r);
    let floored = eig.eigenvalues.map(|v| v.max(1e-8));
    let mut fixed = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..fixed.nrows()).map(|i| fixed[(i, i)].sqrt()).collect();
    for i in 0..fixed.nrows() {
        for j in 0..fixed.ncols() {
            fixed[(i, j)] /= d[i] * d[j];
        }
    }
    Cholesky::new(fixed)
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite { condition: f64::INFINITY })
}

/// Pools of `size` candidates from a fitted model, preprocessed into features.
#[derive(Debug, Clone)]
pub struct ModelPopulation {
    pub model: PopulationModel,
    pub preprocess: PreprocessState,
    pub size: usize,
}

impl PopulationSampler for ModelPopulation {
    fn sample_population(&self, rng: &mut SimRng) -> Result<FeatureMatrix> {
        let raw = self.model.sample(self.size, rng)?;
        self.preprocess.transform_clipped(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn quantile_table_cdf_inverts_quantile() {
        let q = QuantileTable::fit((0..101).map(f64::from).collect());
        for u in [0.0, 0.1, 0.37, 0.9, 1.0] {
            assert!((q.cdf(q.quantile(u)) - u).abs() < 1e-12 || u == 0.0);
        }
    }

    #[test]
    fn singular_correlation_still_factors() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = correlation_factor(r).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
    }
}
