//! Applicant populations: the frozen ground-truth simulator, the learner's
//! refittable copula model and the preprocessing that turns raw candidates
//! into normalized features.

mod copula;
mod ground_truth;
mod preprocess;
mod schema;

pub use copula::{ModelPopulation, PopulationModel, QuantileTable, MIN_FIT_ROWS};
pub use ground_truth::{CategoricalSpec, CourseSpec, GroundTruth, GroundTruthParams, NumericSpec, DEFAULT_GROUND_TRUTH};
pub use preprocess::{OneHot, PreprocessState, ScaleRange, Transformed, DEFAULT_TRAIN_FRACTION};
pub use schema::{CandidateSchema, CandidateTable, CategoricalField, NumericField};
