//! Domain types shared by every module: applicant features, selections and
//! course outcomes.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

/// Upper end of the raw course-GPA scale.
pub const GPA_MAX: f64 = 4.0;

/// Normalized applicant features, row-major, with one group label per row.
///
/// The constant bias column is *not* stored; policies and regressors append it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    groups: Vec<u32>,
    group_count: usize,
}

impl FeatureMatrix {
    /// Builds a matrix whose entries must all lie in `[0, 1]`.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, groups: Vec<u32>, group_count: usize) -> Result<Self> {
        let m = Self::new_unbounded(rows, cols, values, groups, group_count)?;
        if let Some(&v) = m.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange {
                context: "feature matrix",
                value: v,
            });
        }
        Ok(m)
    }

    /// Like [`FeatureMatrix::new`] but only requires finite entries. Used for
    /// transformed data whose values fall outside the fitted scaling range.
    pub fn new_unbounded(
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        groups: Vec<u32>,
        group_count: usize,
    ) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidConfig("feature matrix needs at least one column".into()));
        }
        ensure_dims("feature values", rows * cols, values.len())?;
        ensure_dims("group labels", rows, groups.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        if let Some(&g) = groups.iter().find(|&&g| g as usize >= group_count) {
            return Err(Error::Schema(format!(
                "group label {g} outside label set of size {group_count}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            values,
            groups,
            group_count,
        })
    }

    /// Convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>], groups: Vec<u32>, group_count: usize) -> Result<Self> {
        let cols = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Schema("ragged feature rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, values, groups, group_count)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn groups(&self) -> &[u32] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> u32 {
        self.groups[i]
    }

    /// Size of the label set (labels may be absent from this particular batch).
    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn is_normalized(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        let mut groups = Vec::with_capacity(idx.len());
        for &i in idx {
            values.extend_from_slice(self.row(i));
            groups.push(self.groups[i]);
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            values,
            groups,
            group_count: self.group_count,
        }
    }

    /// Appends a single row (features plus group label).
    pub fn push_row(&mut self, row: &[f64], group: u32) -> Result<()> {
        ensure_dims("appended row", self.cols, row.len())?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("appended row"));
        }
        if group as usize >= self.group_count {
            return Err(Error::Schema(format!("group label {group} outside label set")));
        }
        self.values.extend_from_slice(row);
        self.groups.push(group);
        self.rows += 1;
        Ok(())
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        ensure_dims("stacked columns", self.cols, other.cols)?;
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut groups = self.groups.clone();
        groups.extend_from_slice(&other.groups);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            values,
            groups,
            group_count: self.group_count.max(other.group_count),
        })
    }
}

/// Binary selection vector; `true` means admitted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionVector(Vec<bool>);

impl ActionVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    /// Parses a 0/1 vector; any other entry is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::OutOfRange {
                    context: "action entry",
                    value: f64::from(other),
                }),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    /// Enumerates the `i`-th of the `2^n` actions on `n` candidates (bit `j` of `i`).
    pub fn from_index(i: u64, n: usize) -> Self {
        Self((0..n).map(|j| (i >> j) & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    /// `‖a‖₁`
    pub fn selected(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn admission_rate(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.selected() as f64 / self.0.len() as f64
        }
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn to_bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

/// Scale of an [`OutcomeMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeScale {
    /// Course GPA on `[0, 4]`.
    Raw,
    /// GPA divided by 4, on `[0, 1]`.
    Normalized,
}

impl OutcomeScale {
    pub fn upper(self) -> f64 {
        match self {
            OutcomeScale::Raw => GPA_MAX,
            OutcomeScale::Normalized => 1.0,
        }
    }
}

/// `n × K` course outcomes, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMatrix {
    rows: usize,
    courses: usize,
    values: Vec<f64>,
    scale: OutcomeScale,
}

impl OutcomeMatrix {
    /// Validates finiteness and the range implied by `scale`.
    pub fn new(rows: usize, courses: usize, values: Vec<f64>, scale: OutcomeScale) -> Result<Self> {
        if courses == 0 {
            return Err(Error::InvalidConfig("outcomes need at least one course".into()));
        }
        ensure_dims("outcome values", rows * courses, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome matrix"));
        }
        let hi = scale.upper();
        if let Some(&v) = values.iter().find(|v| !(0.0..=hi).contains(*v)) {
            return Err(Error::OutOfRange {
                context: "outcome matrix",
                value: v,
            });
        }
        Ok(Self {
            rows,
            courses,
            values,
            scale,
        })
    }

    /// Raw GPAs, clipped into `[0, 4]`.
    pub fn from_raw_clipped(rows: usize, courses: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("outcome matrix"));
        }
        for v in &mut values {
            *v = v.clamp(0.0, GPA_MAX);
        }
        Self::new(rows, courses, values, OutcomeScale::Raw)
    }

    /// Zero-row matrix.
    pub fn empty(courses: usize, scale: OutcomeScale) -> Self {
        Self {
            rows: 0,
            courses,
            values: Vec::new(),
            scale,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn courses(&self) -> usize {
        self.courses
    }

    pub fn scale(&self) -> OutcomeScale {
        self.scale
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.courses..(i + 1) * self.courses]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.courses + k]
    }

    pub fn normalized(&self) -> Self {
        match self.scale {
            OutcomeScale::Normalized => self.clone(),
            OutcomeScale::Raw => Self {
                rows: self.rows,
                courses: self.courses,
                values: self.values.iter().map(|v| v / GPA_MAX).collect(),
                scale: OutcomeScale::Normalized,
            },
        }
    }

    pub fn raw(&self) -> Self {
        match self.scale {
            OutcomeScale::Raw => self.clone(),
            OutcomeScale::Normalized => Self {
                rows: self.rows,
                courses: self.courses,
                values: self.values.iter().map(|v| v * GPA_MAX).collect(),
                scale: OutcomeScale::Raw,
            },
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(idx.len() * self.courses);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            courses: self.courses,
            values,
            scale: self.scale,
        }
    }

    /// Per-row mean across courses.
    pub fn row_means(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().sum::<f64>() / self.courses as f64)
            .collect()
    }

    /// Per-row sum across courses.
    pub fn row_totals(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }
}
