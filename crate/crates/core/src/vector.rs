//! Flat model/update vectors.
//!
//! Every reduction sums sequentially, left to right, so results are
//! bit-reproducible for a given input regardless of thread count.

use std::ops::Index;

use crate::error::{ProbitError, Result};

/// Flat real-valued parameter or update vector.
///
/// Entries are always finite; the dimension is fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    values: Vec<f64>,
}

impl ModelVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ProbitError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// Applies `f` to each coordinate, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.values.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn check_dim(&self, other: &ModelVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(ProbitError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &ModelVector) -> Result<Self> {
        axpy(-1.0, other, self)
    }

    pub fn add(&self, other: &ModelVector) -> Result<Self> {
        axpy(1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<Self> {
        self.map(|v| a * v)
    }

    pub fn dot(&self, other: &ModelVector) -> Result<f64> {
        self.check_dim(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc + a * b))
    }
}

impl Index<usize> for ModelVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl TryFrom<Vec<f64>> for ModelVector {
    type Error = ProbitError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// Euclidean norm.
pub fn l2_norm(v: &ModelVector) -> f64 {
    v.values.iter().fold(0.0, |acc, x| acc + x * x).sqrt()
}

pub fn l1_norm(v: &ModelVector) -> f64 {
    v.values.iter().fold(0.0, |acc, x| acc + x.abs())
}

/// Returns `a * x + y`.
pub fn axpy(a: f64, x: &ModelVector, y: &ModelVector) -> Result<ModelVector> {
    x.check_dim(y)?;
    ModelVector::new(
        x.values
            .iter()
            .zip(&y.values)
            .map(|(xi, yi)| a * xi + yi)
            .collect(),
    )
}
