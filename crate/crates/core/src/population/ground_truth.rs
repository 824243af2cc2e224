//! The fixed synthetic simulator `P*(x)`, `P*(y | x)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::types::{OutcomeMatrix, GPA_MAX};

use super::schema::{CandidateSchema, CandidateTable};

/// Parameters shipped with the crate.
pub const DEFAULT_GROUND_TRUTH: &str = include_str!("../../data/ground_truth.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSpec {
    pub name: String,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericSpec {
    pub name: String,
    pub mean: f64,
    pub loading: f64,
    pub sd: f64,
    #[serde(default)]
    pub shifts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CourseSpec {
    pub name: String,
    pub intercept: f64,
    pub noise_sd: f64,
    pub coefficients: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthParams {
    pub format_version: u32,
    pub admission_rate: f64,
    pub categorical: Vec<CategoricalSpec>,
    pub numeric: Vec<NumericSpec>,
    pub course: Vec<CourseSpec>,
}

/// A validated simulator bound to its schema. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    schema: CandidateSchema,
    params: GroundTruthParams,
    /// Per numeric field, per categorical column, per level: additive shift.
    shifts: Vec<Vec<Vec<f64>>>,
    /// Per course, per numeric field.
    coefficients: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub const VERSION: u32 = 1;

    /// The bundled simulator on the admissions schema.
    pub fn bundled() -> Self {
        Self::from_toml(CandidateSchema::admissions(), DEFAULT_GROUND_TRUTH).expect("bundled ground truth is valid")
    }

    pub fn from_toml(schema: CandidateSchema, text: &str) -> Result<Self> {
        let params: GroundTruthParams =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("ground truth: {e}")))?;
        Self::new(schema, params)
    }

    pub fn new(schema: CandidateSchema, params: GroundTruthParams) -> Result<Self> {
        schema.validate()?;
        if params.format_version != Self::VERSION {
            return Err(Error::Version {
                expected: Self::VERSION,
                found: params.format_version,
            });
        }
        if !(0.0..=1.0).contains(&params.admission_rate) {
            return Err(Error::InvalidConfig("admission_rate must lie in [0, 1]".into()));
        }
        let names = |v: Vec<&str>| v.join(",");
        if names(params.categorical.iter().map(|c| c.name.as_str()).collect())
            != names(schema.categorical.iter().map(|c| c.name.as_str()).collect())
        {
            return Err(Error::Schema("ground-truth categoricals do not follow the schema".into()));
        }
        if names(params.numeric.iter().map(|c| c.name.as_str()).collect())
            != names(schema.numeric.iter().map(|c| c.name.as_str()).collect())
        {
            return Err(Error::Schema("ground-truth numeric fields do not follow the schema".into()));
        }
        if names(params.course.iter().map(|c| c.name.as_str()).collect())
            != names(schema.courses.iter().map(String::as_str).collect())
        {
            return Err(Error::Schema("ground-truth courses do not follow the schema".into()));
        }
        for (c, field) in params.categorical.iter().zip(&schema.categorical) {
            if c.probabilities.len() != field.levels.len()
                || c.probabilities.iter().any(|&p| !(p >= 0.0))
                || (c.probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::InvalidConfig(format!(
                    "probabilities for {} must cover its levels and sum to 1",
                    c.name
                )));
            }
        }
        let mut shifts = Vec::with_capacity(params.numeric.len());
        for n in &params.numeric {
            if !(n.sd >= 0.0 && n.mean.is_finite() && n.loading.is_finite()) {
                return Err(Error::InvalidConfig(format!("bad distribution for {}", n.name)));
            }
            let mut per_cat: Vec<Vec<f64>> = schema.categorical.iter().map(|c| vec![0.0; c.levels.len()]).collect();
            for (level, &v) in &n.shifts {
                let hit = schema
                    .categorical
                    .iter()
                    .enumerate()
                    .find_map(|(j, c)| c.level_index(level).map(|l| (j, l as usize)));
                let (j, l) = hit.ok_or_else(|| Error::Schema(format!("shift on unknown level {level}")))?;
                per_cat[j][l] += v;
            }
            shifts.push(per_cat);
        }
        let mut coefficients = Vec::with_capacity(params.course.len());
        for c in &params.course {
            if !(c.noise_sd >= 0.0) {
                return Err(Error::InvalidConfig(format!("noise_sd for {} must be non-negative", c.name)));
            }
            let mut row = vec![0.0; schema.numeric.len()];
            for (field, &v) in &c.coefficients {
                let j = schema
                    .numeric_index(field)
                    .ok_or_else(|| Error::Schema(format!("coefficient on unknown field {field}")))?;
                row[j] = v;
            }
            coefficients.push(row);
        }
        Ok(Self {
            schema,
            params,
            shifts,
            coefficients,
        })
    }

    pub fn schema(&self) -> &CandidateSchema {
        &self.schema
    }

    pub fn params(&self) -> &GroundTruthParams {
        &self.params
    }

    /// Content hash of the simulator parameters (hex SHA-256 of canonical JSON).
    pub fn state_hash(&self) -> String {
        let canon = serde_json::to_vec(&(&self.schema, &self.params)).expect("serializable");
        hex::encode(Sha256::digest(canon))
    }

    /// `n` applicants with historical admission labels and no outcomes.
    pub fn simulate_applicants(&self, n: usize, rng: &mut SimRng) -> CandidateTable {
        let mut table = CandidateTable::empty(self.schema.clone());
        let mut cats = vec![0u32; self.schema.categorical.len()];
        let mut nums = vec![0.0; self.schema.numeric.len()];
        for _ in 0..n {
            for (slot, spec) in cats.iter_mut().zip(&self.params.categorical) {
                *slot = draw_level(&spec.probabilities, rng.random());
            }
            let ability: f64 = rng.sample(StandardNormal);
            for (j, (slot, spec)) in nums.iter_mut().zip(&self.params.numeric).enumerate() {
                let field = &self.schema.numeric[j];
                let shift: f64 = cats.iter().enumerate().map(|(c, &l)| self.shifts[j][c][l as usize]).sum();
                let noise: f64 = rng.sample(StandardNormal);
                *slot = (spec.mean + spec.loading * ability + shift + spec.sd * noise).clamp(field.min, field.max);
            }
            let admitted = rng.random::<f64>() < self.params.admission_rate;
            table.push(&nums, &cats, Some(admitted), None).expect("row follows schema");
        }
        table
    }

    /// Noise-free course GPAs (clipped to `[0, 4]`) for one row of numeric values.
    pub fn mean_outcome(&self, numeric: &[f64]) -> Vec<f64> {
        self.params
            .course
            .iter()
            .zip(&self.coefficients)
            .map(|(c, w)| (c.intercept + w.iter().zip(numeric).map(|(a, b)| a * b).sum::<f64>()).clamp(0.0, GPA_MAX))
            .collect()
    }

    /// Raw course GPAs for every row of `table`.
    pub fn simulate_outcomes(&self, table: &CandidateTable, rng: &mut SimRng) -> Result<OutcomeMatrix> {
        if table.schema != self.schema {
            return Err(Error::Schema("table schema differs from the simulator's".into()));
        }
        let k = self.params.course.len();
        let mut values = Vec::with_capacity(table.rows() * k);
        for i in 0..table.rows() {
            let x = table.numeric_row(i);
            for (c, w) in self.params.course.iter().zip(&self.coefficients) {
                let noise: f64 = rng.sample(StandardNormal);
                let lin = c.intercept + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                values.push(lin + c.noise_sd * noise);
            }
        }
        OutcomeMatrix::from_raw_clipped(table.rows(), k, values)
    }
}

fn draw_level(probs: &[f64], u: f64) -> u32 {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}
