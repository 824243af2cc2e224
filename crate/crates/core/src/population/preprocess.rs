//! Min-max scaling, one-hot encoding and the train/test split.

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;
use crate::types::FeatureMatrix;

use super::schema::{CandidateSchema, CandidateTable};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// One-hot map for a categorical column: encoded levels, as schema indices,
/// in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneHot {
    pub name: String,
    pub levels: Vec<u32>,
}

/// Fitted preprocessing. Numeric columns come first, then each categorical's
/// one-hot block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessState {
    pub format_version: u32,
    pub schema: CandidateSchema,
    pub scales: Vec<ScaleRange>,
    pub encodings: Vec<OneHot>,
    pub train_fraction: f64,
}

/// Result of [`PreprocessState::transform`].
#[derive(Debug, Clone)]
pub struct Transformed {
    pub features: FeatureMatrix,
    /// Count of scaled entries outside `[0, 1]`.
    pub out_of_range: usize,
    /// Count of categorical cells whose level had no encoding column.
    pub unseen_levels: usize,
}

impl PreprocessState {
    pub const VERSION: u32 = 1;

    /// Fits scaling ranges and encodings on `train`.
    pub fn fit(train: &CandidateTable, train_fraction: f64) -> Result<Self> {
        let schema = train.schema.clone();
        schema.validate()?;
        if train.is_empty() {
            return Err(Error::InvalidConfig("cannot fit preprocessing on an empty table".into()));
        }
        let mut scales = Vec::with_capacity(schema.numeric.len());
        for (j, f) in schema.numeric.iter().enumerate() {
            let col = train.numeric_column(j);
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !(min < max) {
                return Err(Error::Schema(format!("field {} is constant in the training data", f.name)));
            }
            scales.push(ScaleRange {
                name: f.name.clone(),
                min,
                max,
            });
        }
        let encodings = schema
            .categorical
            .iter()
            .enumerate()
            .map(|(j, f)| {
                let col = train.categorical_column(j);
                let levels = (0..f.levels.len() as u32).filter(|l| col.contains(l)).collect();
                OneHot {
                    name: f.name.clone(),
                    levels,
                }
            })
            .collect();
        Ok(Self {
            format_version: Self::VERSION,
            schema,
            scales,
            encodings,
            train_fraction,
        })
    }

    /// Random split of row indices into `(train, test)`, each in ascending order.
    pub fn split_indices(rows: usize, train_fraction: f64, rng: &mut SimRng) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.shuffle(rng);
        let cut = (rows as f64 * train_fraction).round() as usize;
        let mut train = idx[..cut].to_vec();
        let mut test = idx[cut..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }

    /// Splits `table`, fits on the training part and returns `(state, train, test)`.
    pub fn fit_split(table: &CandidateTable, train_fraction: f64, rng: &mut SimRng) -> Result<(Self, CandidateTable, CandidateTable)> {
        let (tr, te) = Self::split_indices(table.rows(), train_fraction, rng)?;
        let train = table.select_rows(&tr);
        let test = table.select_rows(&te);
        let state = Self::fit(&train, train_fraction)?;
        Ok((state, train, test))
    }

    pub fn feature_dim(&self) -> usize {
        self.scales.len() + self.encodings.iter().map(|e| e.levels.len()).sum::<usize>()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.scales.iter().map(|s| s.name.clone()).collect();
        for (e, f) in self.encodings.iter().zip(&self.schema.categorical) {
            out.extend(e.levels.iter().map(|&l| format!("{}={}", e.name, f.levels[l as usize])));
        }
        out
    }

    pub fn group_count(&self) -> usize {
        self.schema.group_levels().map_or(0, <[String]>::len)
    }

    /// Scales and encodes; values outside the fitted ranges are kept and counted.
    pub fn transform(&self, table: &CandidateTable) -> Result<Transformed> {
        if table.schema != self.schema {
            return Err(Error::Schema("table schema differs from the fitted preprocessing".into()));
        }
        let d = self.feature_dim();
        let mut values = Vec::with_capacity(table.rows() * d);
        let mut groups = Vec::with_capacity(table.rows());
        let mut out_of_range = 0;
        let mut unseen = 0;
        for i in 0..table.rows() {
            for (v, s) in table.numeric_row(i).iter().zip(&self.scales) {
                let z = (v - s.min) / (s.max - s.min);
                if !(0.0..=1.0).contains(&z) {
                    out_of_range += 1;
                }
                values.push(z);
            }
            for (&l, e) in table.categorical_row(i).iter().zip(&self.encodings) {
                let mut hit = false;
                for &lv in &e.levels {
                    let on = lv == l;
                    hit |= on;
                    values.push(if on { 1.0 } else { 0.0 });
                }
                if !hit {
                    unseen += 1;
                }
            }
            groups.push(table.group(i));
        }
        if unseen > 0 {
            warn!("{unseen} categorical cells had levels unseen during fitting; encoded as all zeros");
        }
        let features = FeatureMatrix::new_unbounded(table.rows(), d, values, groups, self.group_count())?;
        Ok(Transformed {
            features,
            out_of_range,
            unseen_levels: unseen,
        })
    }

    /// [`transform`](Self::transform) followed by clipping into `[0, 1]`, as
    /// policies expect.
    pub fn transform_clipped(&self, table: &CandidateTable) -> Result<FeatureMatrix> {
        let t = self.transform(table)?;
        let f = t.features;
        let values = f.values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        FeatureMatrix::new(f.rows(), f.cols(), values, f.groups().to_vec(), f.group_count())
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
        s.schema.validate()?;
        if s.scales.iter().any(|r| !(r.min < r.max)) {
            return Err(Error::Schema("scaling range with min ≥ max".into()));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::schema::{CategoricalField, NumericField};
    use crate::rng::Stream;

    fn tiny_schema() -> CandidateSchema {
        CandidateSchema {
            numeric: vec![NumericField {
                name: "score".into(),
                min: 0.0,
                max: 10.0,
            }],
            categorical: vec![CategoricalField {
                name: "colour".into(),
                levels: vec!["red".into(), "green".into(), "blue".into()],
            }],
            group_field: "colour".into(),
            courses: vec!["c".into()],
        }
    }

    #[test]
    fn min_max_and_one_hot() {
        let mut t = CandidateTable::empty(tiny_schema());
        t.push(&[1.0], &[0], None, None).unwrap();
        t.push(&[3.0], &[1], None, None).unwrap();
        t.push(&[2.0], &[2], None, None).unwrap();
        let s = PreprocessState::fit(&t, 0.7).unwrap();
        let out = s.transform(&t).unwrap();
        assert_eq!(out.features.cols(), 4);
        assert_eq!(out.features.row(2), &[0.5, 0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert_eq!(out.features.row(i)[1..].iter().sum::<f64>(), 1.0);
        }
        let mut test = CandidateTable::empty(tiny_schema());
        test.push(&[4.0], &[0], None, None).unwrap();
        let out = s.transform(&test).unwrap();
        assert_eq!(out.features.row(0)[0], 1.5);
        assert_eq!(out.out_of_range, 1);
        assert_eq!(s.transform_clipped(&test).unwrap().row(0)[0], 1.0);
    }

    #[test]
    fn unseen_level_encodes_as_zeros() {
        let mut t = CandidateTable::empty(tiny_schema());
        t.push(&[1.0], &[0], None, None).unwrap();
        t.push(&[3.0], &[1], None, None).unwrap();
        let s = PreprocessState::fit(&t, 0.7).unwrap();
        let mut test = CandidateTable::empty(tiny_schema());
        test.push(&[2.0], &[2], None, None).unwrap();
        let out = s.transform(&test).unwrap();
        assert_eq!(out.unseen_levels, 1);
        assert_eq!(&out.features.row(0)[1..], &[0.0, 0.0]);
    }

    #[test]
    fn split_is_seventy_thirty_and_disjoint() {
        let (tr, te) = PreprocessState::split_indices(1000, 0.7, &mut Stream::root(1).rng()).unwrap();
        assert_eq!((tr.len(), te.len()), (700, 300));
        let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }
}
