//! Bootstrap data set and the stage-0 models fitted on it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::output::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::outcome_model::{NigPrior, PosteriorDocument, PosteriorState};
use crate::population::{
    CandidateSchema, CandidateTable, GroundTruth, PopulationModel, PreprocessState, DEFAULT_GROUND_TRUTH, DEFAULT_TRAIN_FRACTION,
};
use crate::rng::Stream;
use crate::types::{FeatureMatrix, OutcomeMatrix, OutcomeScale};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.toml";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const PREPROCESS_FILE: &str = "preprocess.json";
pub const POPULATION_FILE: &str = "population_model.json";
pub const OUTCOME_FILE: &str = "outcome_model.json";
pub const BOOTSTRAP_MANIFEST: &str = "bootstrap.json";

const ARTIFACT_FILES: [&str; 6] = [GROUND_TRUTH_FILE, TRAIN_FILE, TEST_FILE, PREPROCESS_FILE, POPULATION_FILE, OUTCOME_FILE];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub seed: u64,
    pub candidates: usize,
    pub train_fraction: f64,
    /// Replacement simulator parameters; the bundled ones when absent.
    pub ground_truth: Option<PathBuf>,
    pub prior: NigPrior,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            candidates: 1000,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            ground_truth: None,
            prior: NigPrior::default(),
        }
    }
}

impl BootstrapConfig {
    pub fn validated(self) -> Result<Self> {
        if self.candidates == 0 {
            return Err(Error::InvalidConfig("candidates must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        self.prior.validated()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config: BootstrapConfig,
    pub ground_truth_hash: String,
    pub rows: BTreeMap<String, usize>,
    pub artifact_hashes: BTreeMap<String, String>,
}

/// Everything a run starts from.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub ground_truth: GroundTruth,
    pub ground_truth_text: String,
    pub train: CandidateTable,
    pub test: CandidateTable,
    pub preprocess: PreprocessState,
    pub population: PopulationModel,
    pub posterior: PosteriorState,
}

/// Rows of `table` that carry outcomes, as features and normalized outcomes.
pub fn labelled_rows(table: &CandidateTable, preprocess: &PreprocessState) -> Result<(FeatureMatrix, OutcomeMatrix)> {
    let idx = table.rows_with_outcomes();
    let sub = table.select_rows(&idx);
    let x = preprocess.transform_clipped(&sub)?;
    let k = table.schema.courses.len();
    let values: Vec<f64> = idx.iter().flat_map(|&i| table.outcome(i).expect("selected rows have outcomes").to_vec()).collect();
    let y = if idx.is_empty() {
        OutcomeMatrix::empty(k, OutcomeScale::Raw)
    } else {
        OutcomeMatrix::new(idx.len(), k, values, OutcomeScale::Raw)?
    };
    Ok((x, y.normalized()))
}

impl Artifacts {
    /// Simulates the historical data set, splits it and fits the stage-0 models.
    pub fn bootstrap(cfg: &BootstrapConfig) -> Result<Self> {
        let cfg = cfg.clone().validated()?;
        let ground_truth_text = match &cfg.ground_truth {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => DEFAULT_GROUND_TRUTH.to_string(),
        };
        let gt = GroundTruth::from_toml(CandidateSchema::admissions(), &ground_truth_text)?;
        let root = Stream::root(cfg.seed).named("bootstrap");
        let mut table = gt.simulate_applicants(cfg.candidates, &mut root.named("applicants").rng());
        // Outcomes are simulated for everyone but only kept for admitted rows.
        let y = gt.simulate_outcomes(&table, &mut root.named("outcomes").rng())?;
        for i in 0..table.rows() {
            if table.admitted(i) == Some(true) {
                table.set_outcome(i, Some(y.row(i).to_vec()))?;
            }
        }
        let (preprocess, train, test) = PreprocessState::fit_split(&table, cfg.train_fraction, &mut root.named("split").rng())?;
        Self::fit(gt, ground_truth_text, train, test, preprocess, cfg.prior)
    }

    fn fit(
        ground_truth: GroundTruth,
        ground_truth_text: String,
        train: CandidateTable,
        test: CandidateTable,
        preprocess: PreprocessState,
        prior: NigPrior,
    ) -> Result<Self> {
        let population = PopulationModel::fit(&train)?;
        let (x, y) = labelled_rows(&train, &preprocess)?;
        let posterior = PosteriorState::prior(preprocess.feature_dim(), train.schema.courses.len(), prior)?.update(&x, &y)?;
        info!(
            "bootstrap: {} train rows ({} with outcomes), {} test rows",
            train.rows(),
            x.rows(),
            test.rows()
        );
        Ok(Self {
            ground_truth,
            ground_truth_text,
            train,
            test,
            preprocess,
            population,
            posterior,
        })
    }

    fn files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let csv = |t: &CandidateTable| -> Result<Vec<u8>> {
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            Ok(buf)
        };
        Ok(vec![
            (GROUND_TRUTH_FILE, self.ground_truth_text.clone().into_bytes()),
            (TRAIN_FILE, csv(&self.train)?),
            (TEST_FILE, csv(&self.test)?),
            (PREPROCESS_FILE, self.preprocess.to_json()?.into_bytes()),
            (POPULATION_FILE, self.population.to_json()?.into_bytes()),
            (OUTCOME_FILE, self.posterior.to_document().to_json()?.into_bytes()),
        ])
    }

    /// Writes every artifact plus `bootstrap.json`; returns the content hashes.
    pub fn write(&self, dir: &Path, cfg: &BootstrapConfig) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for (name, bytes) in self.files()? {
            write_atomic(&dir.join(name), &bytes)?;
            hashes.insert(name.to_string(), sha256_hex(&bytes));
        }
        let rows = BTreeMap::from([
            ("train".to_string(), self.train.rows()),
            ("test".to_string(), self.test.rows()),
            ("train_with_outcomes".to_string(), self.train.rows_with_outcomes().len()),
        ]);
        let manifest = BootstrapManifest {
            format_version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            ground_truth_hash: self.ground_truth.state_hash(),
            rows,
            artifact_hashes: hashes.clone(),
        };
        write_atomic(&dir.join(BOOTSTRAP_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(hashes)
    }

    /// Reads artifacts written by [`Artifacts::write`]; returns them with their
    /// content hashes.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let mut bytes = BTreeMap::new();
        for name in ARTIFACT_FILES {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            bytes.insert(name, fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
        let hashes = bytes.iter().map(|(k, v)| (k.to_string(), sha256_hex(v))).collect();
        let text = |name: &str| -> Result<String> {
            String::from_utf8(bytes[name].clone()).map_err(|_| Error::Schema(format!("{name} is not UTF-8")))
        };
        let ground_truth_text = text(GROUND_TRUTH_FILE)?;
        let ground_truth = GroundTruth::from_toml(CandidateSchema::admissions(), &ground_truth_text)?;
        let schema = ground_truth.schema().clone();
        let train = CandidateTable::read_csv(schema.clone(), bytes[TRAIN_FILE].as_slice())?;
        let test = CandidateTable::read_csv(schema, bytes[TEST_FILE].as_slice())?;
        let preprocess = PreprocessState::from_json(&text(PREPROCESS_FILE)?)?;
        let population = PopulationModel::from_json(&text(POPULATION_FILE)?)?;
        let posterior = PosteriorDocument::from_json(&text(OUTCOME_FILE)?)?;
        if posterior.feature_dim() != preprocess.feature_dim() {
            return Err(Error::Schema("outcome model and preprocessing disagree on feature count".into()));
        }
        Ok((
            Self {
                ground_truth,
                ground_truth_text,
                train,
                test,
                preprocess,
                population,
                posterior,
            },
            hashes,
        ))
    }

    /// Held-out rows with outcomes: the one-shot evaluation set.
    pub fn test_set(&self) -> Result<(FeatureMatrix, OutcomeMatrix)> {
        labelled_rows(&self.test, &self.preprocess)
    }
}
