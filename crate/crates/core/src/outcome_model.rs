//! Bayesian linear outcome model `P(y | x, a = 1)`.
//!
//! Each course is an independent Normal–Inverse-Gamma regression on the
//! features with a constant 1 appended:
//!
//! ```text
//! σ² ~ InvGamma(α, β),   w | σ² ~ N(m, σ² Λ⁻¹),   y = wᵀz + N(0, σ²)
//! ```
//!
//! The model is fitted on raw GPAs; samples are clipped to `[0, 4]` and then
//! divided by 4 before they reach the utility.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};
use crate::rng::SimRng;
use crate::sampling::OutcomeSampler;
use crate::types::{FeatureMatrix, OutcomeMatrix, OutcomeScale, GPA_MAX};

/// Prior hyperparameters shared by every course: `m = 0`, `Λ = precision · I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NigPrior {
    pub precision: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for NigPrior {
    fn default() -> Self {
        Self {
            precision: 1.0,
            alpha: 2.0,
            beta: 1.0,
        }
    }
}

impl NigPrior {
    pub fn validated(self) -> Result<Self> {
        for (name, v) in [("precision", self.precision), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("prior {name} must be positive, got {v}")));
            }
        }
        Ok(self)
    }
}

/// Posterior of one course's regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoursePosterior {
    pub mean: Vec<f64>,
    /// Row-major `p × p` precision matrix.
    pub precision: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl CoursePosterior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn precision_matrix(&self) -> DMatrix<f64> {
        let p = self.dim();
        DMatrix::from_row_slice(p, p, &self.precision)
    }

    fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        factor(self.precision_matrix())
    }

    /// `Λ⁻¹`, the weight covariance per unit noise variance.
    pub fn covariance_scale(&self) -> Result<DMatrix<f64>> {
        Ok(self.cholesky()?.inverse())
    }

    /// One joint draw `(w, σ²)`.
    fn draw(&self, chol: &Cholesky<f64, Dyn>, rng: &mut SimRng) -> (Vec<f64>, f64) {
        let sigma2 = draw_noise_variance(self.alpha, self.beta, rng);
        let p = self.dim();
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        // Λ = L Lᵀ, so L⁻ᵀ z has covariance Λ⁻¹.
        let offset = chol
            .l()
            .transpose()
            .solve_upper_triangular(&z)
            .expect("Cholesky factor has a positive diagonal");
        let w = self.mean_vector() + offset * sigma2.sqrt();
        (w.iter().copied().collect(), sigma2)
    }
}

fn draw_noise_variance(alpha: f64, beta: f64, rng: &mut SimRng) -> f64 {
    let g: f64 = Gamma::new(alpha, 1.0).expect("alpha > 0").sample(rng);
    beta / g.max(f64::MIN_POSITIVE)
}

fn factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("precision matrix"));
    }
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => Err(Error::NotPositiveDefinite {
            condition: condition_number(&m),
        }),
    }
}

/// `|λ|max / |λ|min` of the symmetric part.
fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let hi = abs.iter().cloned().fold(0.0, f64::max);
    let lo = abs.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Design matrix `[x, 1]` for a feature batch.
pub fn design_matrix(x: &FeatureMatrix) -> DMatrix<f64> {
    let d = x.cols();
    DMatrix::from_fn(x.rows(), d + 1, |i, j| if j < d { x.row(i)[j] } else { 1.0 })
}

/// Posterior over all courses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    /// Regression dimension `p` (features plus bias when built from a
    /// [`FeatureMatrix`]).
    pub dim: usize,
    pub courses: Vec<CoursePosterior>,
    pub observations: usize,
}

impl PosteriorState {
    /// Prior for `features` inputs (a bias weight is added) and `courses` outputs.
    pub fn prior(features: usize, courses: usize, prior: NigPrior) -> Result<Self> {
        Self::prior_with_dim(features + 1, courses, prior)
    }

    /// Prior over a raw `dim`-dimensional design, no implicit bias.
    pub fn prior_with_dim(dim: usize, courses: usize, prior: NigPrior) -> Result<Self> {
        let prior = prior.validated()?;
        if dim == 0 || courses == 0 {
            return Err(Error::InvalidConfig("outcome model needs a dimension and a course".into()));
        }
        let precision = DMatrix::<f64>::identity(dim, dim) * prior.precision;
        let course = CoursePosterior {
            mean: vec![0.0; dim],
            precision: row_major(&precision),
            alpha: prior.alpha,
            beta: prior.beta,
        };
        Ok(Self {
            dim,
            courses: vec![course; courses],
            observations: 0,
        })
    }

    /// Builds a state from explicit per-course parts, checking shapes only.
    pub fn from_parts(dim: usize, courses: Vec<CoursePosterior>, observations: usize) -> Result<Self> {
        let s = Self {
            dim,
            courses,
            observations,
        };
        s.validate_shapes()?;
        Ok(s)
    }

    fn validate_shapes(&self) -> Result<()> {
        if self.courses.is_empty() {
            return Err(Error::InvalidConfig("outcome model needs at least one course".into()));
        }
        for c in &self.courses {
            ensure_dims("posterior mean", self.dim, c.mean.len())?;
            ensure_dims("posterior precision", self.dim * self.dim, c.precision.len())?;
            if !(c.alpha > 0.0 && c.beta > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "noise hyperparameters must be positive (alpha {}, beta {})",
                    c.alpha, c.beta
                )));
            }
        }
        Ok(())
    }

    pub fn course_count(&self) -> usize {
        self.courses.len()
    }

    /// Input feature count when the design includes a bias column.
    pub fn feature_dim(&self) -> usize {
        self.dim - 1
    }

    /// Conjugate update with admitted candidates and their outcomes (either scale;
    /// the model works on raw GPA).
    pub fn update(&self, x: &FeatureMatrix, y: &OutcomeMatrix) -> Result<Self> {
        ensure_dims("outcome model inputs", self.feature_dim(), x.cols())?;
        ensure_dims("outcome rows", x.rows(), y.rows())?;
        let raw = y.raw();
        let targets = DMatrix::from_row_slice(raw.rows(), raw.courses(), raw.values());
        self.update_design(&design_matrix(x), &targets)
    }

    /// Conjugate update on an explicit design `Z` (`n × p`) and targets `Y` (`n × K`):
    ///
    /// `Λ' = Λ + ZᵀZ`, `m' = Λ'⁻¹(Λm + Zᵀy)`, `α' = α + n/2`,
    /// `β' = β + ½(yᵀy + mᵀΛm − m'ᵀΛ'm')`.
    pub fn update_design(&self, z: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        ensure_dims("design columns", self.dim, z.ncols())?;
        ensure_dims("target rows", z.nrows(), y.nrows())?;
        ensure_dims("target columns", self.courses.len(), y.ncols())?;
        if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression data"));
        }
        let n = z.nrows();
        if n == 0 {
            return Ok(self.clone());
        }
        let ztz = z.transpose() * z;
        let mut courses = Vec::with_capacity(self.courses.len());
        for (k, c) in self.courses.iter().enumerate() {
            let lambda = c.precision_matrix();
            let m = c.mean_vector();
            let yk = y.column(k).into_owned();
            let lambda_new = &lambda + &ztz;
            let chol = factor(lambda_new.clone())?;
            let rhs = &lambda * &m + z.transpose() * &yk;
            let m_new = chol.solve(&rhs);
            let quad_old = m.dot(&(&lambda * &m));
            let quad_new = m_new.dot(&(&lambda_new * &m_new));
            let beta = c.beta + 0.5 * (yk.dot(&yk) + quad_old - quad_new);
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::NonFinite("posterior noise scale"));
            }
            courses.push(CoursePosterior {
                mean: m_new.iter().copied().collect(),
                precision: row_major(&lambda_new),
                alpha: c.alpha + n as f64 / 2.0,
                beta,
            });
        }
        debug!("outcome model updated with {n} rows");
        Ok(Self {
            dim: self.dim,
            courses,
            observations: self.observations + n,
        })
    }

    /// `mᵀz` per course, clipped to `[0, 4]`, on the raw scale.
    pub fn predict_mean(&self, x: &FeatureMatrix) -> Result<OutcomeMatrix> {
        ensure_dims("outcome model inputs", self.feature_dim(), x.cols())?;
        let weights: Vec<&[f64]> = self.courses.iter().map(|c| c.mean.as_slice()).collect();
        predict_linear(&weights, x)
    }

    /// Thompson draw: one `(w, σ²)` per course.
    pub fn thompson_draw(&self, rng: &mut SimRng) -> Result<SampledRegressor> {
        let mut weights = Vec::with_capacity(self.courses.len());
        let mut noise_var = Vec::with_capacity(self.courses.len());
        for c in &self.courses {
            let chol = c.cholesky()?;
            let (w, s2) = c.draw(&chol, rng);
            weights.push(w);
            noise_var.push(s2);
        }
        Ok(SampledRegressor { weights, noise_var })
    }

    /// Unclipped posterior-predictive draw on an explicit design, one column
    /// per course: a single `(w, σ²)` per course, then independent noise per row.
    pub fn predictive_sample_design(&self, z: &DMatrix<f64>, rng: &mut SimRng) -> Result<DMatrix<f64>> {
        ensure_dims("design columns", self.dim, z.ncols())?;
        let mut out = DMatrix::zeros(z.nrows(), self.courses.len());
        for (k, c) in self.courses.iter().enumerate() {
            let chol = c.cholesky()?;
            let (w, s2) = c.draw(&chol, rng);
            let sd = s2.sqrt();
            for i in 0..z.nrows() {
                let mean: f64 = (0..self.dim).map(|j| z[(i, j)] * w[j]).sum();
                out[(i, k)] = mean + sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(out)
    }

    /// Posterior-predictive outcomes for a batch, clipped to `[0, 4]` and normalized.
    pub fn posterior_predictive_sample(&self, x: &FeatureMatrix, rng: &mut SimRng) -> Result<OutcomeMatrix> {
        ensure_dims("outcome model inputs", self.feature_dim(), x.cols())?;
        let draw = self.predictive_sample_design(&design_matrix(x), rng)?;
        clip_normalize(&draw)
    }

    pub fn to_document(&self) -> PosteriorDocument {
        PosteriorDocument {
            format_version: PosteriorDocument::VERSION,
            state: self.clone(),
        }
    }
}

impl OutcomeSampler for PosteriorState {
    fn sample_outcomes(&self, x: &FeatureMatrix, rng: &mut SimRng) -> Result<OutcomeMatrix> {
        self.posterior_predictive_sample(x, rng)
    }

    fn courses(&self) -> usize {
        self.courses.len()
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

fn clip_normalize(draw: &DMatrix<f64>) -> Result<OutcomeMatrix> {
    let mut values = Vec::with_capacity(draw.len());
    for i in 0..draw.nrows() {
        for k in 0..draw.ncols() {
            values.push(draw[(i, k)].clamp(0.0, GPA_MAX) / GPA_MAX);
        }
    }
    OutcomeMatrix::new(draw.nrows(), draw.ncols(), values, OutcomeScale::Normalized)
}

fn predict_linear(weights: &[&[f64]], x: &FeatureMatrix) -> Result<OutcomeMatrix> {
    let d = x.cols();
    let k = weights.len();
    let mut values = Vec::with_capacity(x.rows() * k);
    for i in 0..x.rows() {
        let row = x.row(i);
        for w in weights {
            let v = w[..d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + w[d];
            values.push(v);
        }
    }
    OutcomeMatrix::from_raw_clipped(x.rows(), k, values)
}

/// A single regressor drawn from the posterior; fixed for a whole stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledRegressor {
    /// Per course, `d + 1` weights (bias last).
    pub weights: Vec<Vec<f64>>,
    pub noise_var: Vec<f64>,
}

impl SampledRegressor {
    pub fn new(weights: Vec<Vec<f64>>, noise_var: Vec<f64>) -> Result<Self> {
        ensure_dims("regressor courses", weights.len(), noise_var.len())?;
        if weights.is_empty() {
            return Err(Error::InvalidConfig("regressor needs at least one course".into()));
        }
        let p = weights[0].len();
        if p < 2 || weights.iter().any(|w| w.len() != p) {
            return Err(Error::Schema("regressor weights must share one length ≥ 2".into()));
        }
        if noise_var.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("noise variances must be non-negative".into()));
        }
        Ok(Self { weights, noise_var })
    }

    pub fn feature_dim(&self) -> usize {
        self.weights[0].len() - 1
    }

    /// `wᵀz` per course, clipped to `[0, 4]`, raw scale.
    pub fn predict_mean(&self, x: &FeatureMatrix) -> Result<OutcomeMatrix> {
        ensure_dims("regressor inputs", self.feature_dim(), x.cols())?;
        let weights: Vec<&[f64]> = self.weights.iter().map(Vec::as_slice).collect();
        predict_linear(&weights, x)
    }
}

impl OutcomeSampler for SampledRegressor {
    /// `wᵀz + N(0, σ²)`, clipped and normalized.
    fn sample_outcomes(&self, x: &FeatureMatrix, rng: &mut SimRng) -> Result<OutcomeMatrix> {
        ensure_dims("regressor inputs", self.feature_dim(), x.cols())?;
        let d = x.cols();
        let k = self.weights.len();
        let sds: Vec<f64> = self.noise_var.iter().map(|v| v.sqrt()).collect();
        let mut values = Vec::with_capacity(x.rows() * k);
        for i in 0..x.rows() {
            let row = x.row(i);
            for (w, sd) in self.weights.iter().zip(&sds) {
                let mean = w[..d].iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + w[d];
                let v = mean + sd * rng.sample::<f64, _>(StandardNormal);
                values.push(v.clamp(0.0, GPA_MAX) / GPA_MAX);
            }
        }
        OutcomeMatrix::new(x.rows(), k, values, OutcomeScale::Normalized)
    }

    fn courses(&self) -> usize {
        self.weights.len()
    }
}

/// Versioned on-disk form of a [`PosteriorState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDocument {
    pub format_version: u32,
    pub state: PosteriorState,
}

impl PosteriorDocument {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<PosteriorState> {
        let doc: PosteriorDocument = serde_json::from_str(text)?;
        if doc.format_version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: doc.format_version,
            });
        }
        doc.state.validate_shapes()?;
        Ok(doc.state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn scalar_state(precision: f64, alpha: f64, beta: f64) -> PosteriorState {
        PosteriorState::prior_with_dim(
            1,
            1,
            NigPrior {
                precision,
                alpha,
                beta,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_scalar_observation() {
        let s = scalar_state(1.0, 2.0, 1.0);
        let z = DMatrix::from_element(1, 1, 1.0);
        let y = DMatrix::from_element(1, 1, 1.0);
        let post = s.update_design(&z, &y).unwrap();
        let c = &post.courses[0];
        assert!((c.mean[0] - 0.5).abs() < 1e-15);
        assert!((c.precision[0] - 2.0).abs() < 1e-15);
        assert!((c.alpha - 2.5).abs() < 1e-15);
        // β' = 1 + ½(1 + 0 − 0.5) = 1.25
        assert!((c.beta - 1.25).abs() < 1e-15);
        assert_eq!(post.observations, 1);
    }

    #[test]
    fn empty_update_is_identity() {
        let s = PosteriorState::prior(3, 3, NigPrior::default()).unwrap();
        let x = FeatureMatrix::new(0, 3, vec![], vec![], 2).unwrap();
        let y = OutcomeMatrix::empty(3, OutcomeScale::Raw);
        assert_eq!(s.update(&x, &y).unwrap(), s);
    }

    #[test]
    fn predict_mean_with_unit_weights() {
        let reg = SampledRegressor::new(vec![vec![0.0, 1.0, 0.0]], vec![0.0]).unwrap();
        let x = FeatureMatrix::from_rows(&[vec![0.2, 0.7]], vec![0], 1).unwrap();
        assert!((reg.predict_mean(&x).unwrap().get(0, 0) - 0.7).abs() < 1e-15);
        let zero = SampledRegressor::new(vec![vec![0.0; 3]], vec![0.0]).unwrap();
        assert_eq!(zero.predict_mean(&x).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn non_positive_definite_precision_is_reported() {
        let bad = CoursePosterior {
            mean: vec![0.0, 0.0],
            precision: vec![1.0, 0.0, 0.0, -50.0],
            alpha: 2.0,
            beta: 1.0,
        };
        let s = PosteriorState::from_parts(2, vec![bad], 0).unwrap();
        let z = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let y = DMatrix::from_element(1, 1, 1.0);
        match s.update_design(&z, &y) {
            Err(Error::NotPositiveDefinite { condition }) => assert!((condition - 25.0).abs() < 1e-9),
            other => panic!("expected a positive-definiteness error, got {other:?}"),
        }
    }

    #[test]
    fn thompson_draw_is_deterministic() {
        let s = PosteriorState::prior(4, 3, NigPrior::default()).unwrap();
        let a = s.thompson_draw(&mut Stream::root(3).rng()).unwrap();
        let b = s.thompson_draw(&mut Stream::root(3).rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_posterior_concentrates() {
        let s = scalar_state(1e12, 1e9, 1e-3);
        let mut rng = Stream::root(1).rng();
        let worst = (0..200)
            .map(|_| s.thompson_draw(&mut rng).unwrap().weights[0][0].abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6);
    }

    #[test]
    fn document_round_trip() {
        let s = PosteriorState::prior(2, 3, NigPrior::default()).unwrap();
        let x = FeatureMatrix::from_rows(&[vec![0.1, 0.9], vec![0.4, 0.3]], vec![0, 1], 2).unwrap();
        let y = OutcomeMatrix::new(2, 3, vec![3.0, 2.0, 1.0, 2.5, 2.5, 3.5], OutcomeScale::Raw).unwrap();
        let s = s.update(&x, &y).unwrap();
        let text = s.to_document().to_json().unwrap();
        assert_eq!(PosteriorDocument::from_json(&text).unwrap(), s);
        let bumped = text.replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(PosteriorDocument::from_json(&bumped), Err(Error::Version { .. })));
    }

    #[test]
    fn predictive_samples_are_normalized() {
        let s = PosteriorState::prior(2, 3, NigPrior::default()).unwrap();
        let x = FeatureMatrix::from_rows(&vec![vec![0.0, 1.0]; 50], vec![0; 50], 1).unwrap();
        let y = s.posterior_predictive_sample(&x, &mut Stream::root(2).rng()).unwrap();
        assert_eq!(y.scale(), OutcomeScale::Normalized);
        assert!(y.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
