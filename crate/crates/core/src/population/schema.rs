//! Candidate schema and raw (unscaled) candidate tables with CSV I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericField {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalField {
    pub name: String,
    pub levels: Vec<String>,
}

impl CategoricalField {
    pub fn level_index(&self, level: &str) -> Option<u32> {
        self.levels.iter().position(|l| l == level).map(|i| i as u32)
    }
}

/// Column layout of a candidate table. `group_field` names the categorical
/// column used as the protected attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSchema {
    pub numeric: Vec<NumericField>,
    pub categorical: Vec<CategoricalField>,
    pub group_field: String,
    pub courses: Vec<String>,
}

impl CandidateSchema {
    /// The admissions schema: five academic/demographic numbers, gender and
    /// citizenship, three course GPAs.
    pub fn admissions() -> Self {
        let num = |name: &str, min: f64, max: f64| NumericField {
            name: name.into(),
            min,
            max,
        };
        let cat = |name: &str, levels: &[&str]| CategoricalField {
            name: name.into(),
            levels: levels.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            numeric: vec![
                num("hs_gpa", 1.0, 6.0),
                num("science", 0.0, 4.0),
                num("language", 0.0, 2.0),
                num("other", 0.0, 2.0),
                num("age", 18.0, 40.0),
            ],
            categorical: vec![
                cat("gender", &["female", "male"]),
                cat("citizenship", &["domestic", "nordic", "international"]),
            ],
            group_field: "gender".into(),
            courses: vec!["course_1".into(), "course_2".into(), "course_3".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.numeric.is_empty() && self.categorical.is_empty() {
            return Err(Error::Schema("schema has no feature columns".into()));
        }
        for f in &self.numeric {
            if !(f.min < f.max) {
                return Err(Error::Schema(format!("field {} has min ≥ max", f.name)));
            }
        }
        for c in &self.categorical {
            if c.levels.is_empty() {
                return Err(Error::Schema(format!("categorical {} has no levels", c.name)));
            }
            let mut sorted = c.levels.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != c.levels.len() {
                return Err(Error::Schema(format!("categorical {} repeats a level", c.name)));
            }
        }
        self.group_index()?;
        Ok(())
    }

    /// Position of the group column among the categoricals.
    pub fn group_index(&self) -> Result<usize> {
        self.categorical
            .iter()
            .position(|c| c.name == self.group_field)
            .ok_or_else(|| Error::Schema(format!("group field {} is not categorical", self.group_field)))
    }

    pub fn group_levels(&self) -> Result<&[String]> {
        Ok(&self.categorical[self.group_index()?].levels)
    }

    pub fn numeric_index(&self, name: &str) -> Option<usize> {
        self.numeric.iter().position(|f| f.name == name)
    }

    pub fn categorical_index(&self, name: &str) -> Option<usize> {
        self.categorical.iter().position(|f| f.name == name)
    }
}

/// Raw candidates: numeric values, categorical level indices, optional
/// historical admission label and optional course GPAs (raw scale), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTable {
    pub schema: CandidateSchema,
    numeric: Vec<f64>,
    categorical: Vec<u32>,
    admitted: Vec<Option<bool>>,
    outcomes: Vec<Option<Vec<f64>>>,
}

impl CandidateTable {
    pub fn empty(schema: CandidateSchema) -> Self {
        Self {
            schema,
            numeric: Vec::new(),
            categorical: Vec::new(),
            admitted: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.admitted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.admitted.is_empty()
    }

    pub fn numeric_row(&self, i: usize) -> &[f64] {
        let w = self.schema.numeric.len();
        &self.numeric[i * w..(i + 1) * w]
    }

    pub fn categorical_row(&self, i: usize) -> &[u32] {
        let w = self.schema.categorical.len();
        &self.categorical[i * w..(i + 1) * w]
    }

    pub fn numeric_column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.numeric_row(i)[j]).collect()
    }

    pub fn categorical_column(&self, j: usize) -> Vec<u32> {
        (0..self.rows()).map(|i| self.categorical_row(i)[j]).collect()
    }

    pub fn admitted(&self, i: usize) -> Option<bool> {
        self.admitted[i]
    }

    pub fn outcome(&self, i: usize) -> Option<&[f64]> {
        self.outcomes[i].as_deref()
    }

    pub fn set_outcome(&mut self, i: usize, y: Option<Vec<f64>>) -> Result<()> {
        if let Some(v) = &y {
            ensure_dims("outcome width", self.schema.courses.len(), v.len())?;
        }
        self.outcomes[i] = y;
        Ok(())
    }

    pub fn set_admitted(&mut self, i: usize, label: Option<bool>) {
        self.admitted[i] = label;
    }

    /// Group label of row `i` (index into the group field's levels).
    pub fn group(&self, i: usize) -> u32 {
        let g = self.schema.group_index().expect("validated schema");
        self.categorical_row(i)[g]
    }

    pub fn push(&mut self, numeric: &[f64], categorical: &[u32], admitted: Option<bool>, outcome: Option<Vec<f64>>) -> Result<()> {
        ensure_dims("numeric fields", self.schema.numeric.len(), numeric.len())?;
        ensure_dims("categorical fields", self.schema.categorical.len(), categorical.len())?;
        if numeric.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("candidate row"));
        }
        for (c, &l) in self.schema.categorical.iter().zip(categorical) {
            if l as usize >= c.levels.len() {
                return Err(Error::Schema(format!("level {l} outside {}", c.name)));
            }
        }
        if let Some(v) = &outcome {
            ensure_dims("outcome width", self.schema.courses.len(), v.len())?;
        }
        self.numeric.extend_from_slice(numeric);
        self.categorical.extend_from_slice(categorical);
        self.admitted.push(admitted);
        self.outcomes.push(outcome);
        Ok(())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.schema.clone());
        for &i in idx {
            out.numeric.extend_from_slice(self.numeric_row(i));
            out.categorical.extend_from_slice(self.categorical_row(i));
            out.admitted.push(self.admitted[i]);
            out.outcomes.push(self.outcomes[i].clone());
        }
        out
    }

    pub fn append(&mut self, other: &Self) -> Result<()> {
        if other.schema != self.schema {
            return Err(Error::Schema("appending a table with a different schema".into()));
        }
        self.numeric.extend_from_slice(&other.numeric);
        self.categorical.extend_from_slice(&other.categorical);
        self.admitted.extend_from_slice(&other.admitted);
        self.outcomes.extend(other.outcomes.iter().cloned());
        Ok(())
    }

    /// Indices of rows carrying outcomes.
    pub fn rows_with_outcomes(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.outcomes[i].is_some()).collect()
    }

    /// Writes a CSV whose header is the schema's field names, then
    /// `admitted` and the course columns (empty cells for missing values).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<&str> = self.schema.numeric.iter().map(|f| f.name.as_str()).collect();
        header.extend(self.schema.categorical.iter().map(|f| f.name.as_str()));
        header.push("admitted");
        header.extend(self.schema.courses.iter().map(String::as_str));
        wr.write_record(&header)?;
        for i in 0..self.rows() {
            let mut rec: Vec<String> = self.numeric_row(i).iter().map(|v| v.to_string()).collect();
            for (c, &l) in self.schema.categorical.iter().zip(self.categorical_row(i)) {
                rec.push(c.levels[l as usize].clone());
            }
            rec.push(match self.admitted[i] {
                Some(true) => "1".into(),
                Some(false) => "0".into(),
                None => String::new(),
            });
            match &self.outcomes[i] {
                Some(y) => rec.extend(y.iter().map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), self.schema.courses.len())),
            }
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("candidate table", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(schema: CandidateSchema, r: R) -> Result<Self> {
        schema.validate()?;
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("missing column {name}")))
        };
        let num_cols = schema.numeric.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
        let cat_cols = schema.categorical.iter().map(|f| col(&f.name)).collect::<Result<Vec<_>>>()?;
        let adm_col = col("admitted")?;
        let out_cols = schema.courses.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
        let mut table = Self::empty(schema);
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let parse = |j: usize| -> Result<f64> {
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("row {}: cannot parse {:?}", line + 1, &rec[j])))
            };
            let numeric = num_cols.iter().map(|&j| parse(j)).collect::<Result<Vec<_>>>()?;
            let mut categorical = Vec::with_capacity(cat_cols.len());
            for (f, &j) in table.schema.categorical.iter().zip(&cat_cols) {
                let l = f
                    .level_index(rec[j].trim())
                    .ok_or_else(|| Error::Schema(format!("row {}: unknown {} level {:?}", line + 1, f.name, &rec[j])))?;
                categorical.push(l);
            }
            let admitted = match rec[adm_col].trim() {
                "" => None,
                "1" => Some(true),
                "0" => Some(false),
                other => return Err(Error::Schema(format!("row {}: admitted must be 0/1, got {other:?}", line + 1))),
            };
            let present: Vec<bool> = out_cols.iter().map(|&j| !rec[j].trim().is_empty()).collect();
            let outcome = if present.iter().all(|&p| p) {
                Some(out_cols.iter().map(|&j| parse(j)).collect::<Result<Vec<_>>>()?)
            } else if present.iter().any(|&p| p) {
                return Err(Error::Schema(format!("row {}: partially missing outcomes", line + 1)));
            } else {
                None
            };
            table.push(&numeric, &categorical, admitted, outcome)?;
        }
        Ok(table)
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv_file(schema: CandidateSchema, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(schema, f)
    }
}
