//! Row-major sample matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` observations of a `d`-dimensional variable, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        if values.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: values.len() % dim,
            });
        }
        Ok(Self { dim, values })
    }

    /// Empty dataset of the given dimension, for incremental filling.
    pub fn with_capacity(dim: usize, n: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            values: Vec::with_capacity(dim * n),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyDataset)?;
        let dim = first.as_ref().len();
        let mut out = Self::with_capacity(dim.max(1), rows.len());
        for r in rows {
            out.push(r.as_ref())?;
        }
        Ok(out)
    }

    /// One-dimensional dataset.
    pub fn from_column(xs: &[f64]) -> Self {
        Self {
            dim: 1,
            values: xs.to_vec(),
        }
    }

    /// Stacks equally long columns side by side.
    pub fn from_columns(cols: &[&[f64]]) -> Result<Self> {
        let first = cols.first().ok_or(Error::EmptyDataset)?;
        let n = first.len();
        if let Some(bad) = cols.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        let mut values = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            values.extend(cols.iter().map(|c| c[i]));
        }
        Self::new(cols.len(), values)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: row.len(),
            });
        }
        self.values.extend_from_slice(row);
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// Keeps the listed coordinates, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: bad + 1,
            });
        }
        let mut values = Vec::with_capacity(self.len() * cols.len());
        for r in self.rows() {
            values.extend(cols.iter().map(|&c| r[c]));
        }
        Self::new(cols.len(), values)
    }

    /// Elementwise sum with a same-shaped matrix (observation = latent + noise).
    pub fn add(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            dim: self.dim,
            values,
        })
    }

    /// Multiplies every entry by `c`.
    pub fn scaled(&self, c: f64) -> Dataset {
        Self {
            dim: self.dim,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// Rows at the given indices.
    pub fn take(&self, idx: &[usize]) -> Dataset {
        let mut out = Self::with_capacity(self.dim, idx.len());
        for &i in idx {
            out.values.extend_from_slice(self.row(i));
        }
        out
    }

    pub(crate) fn check_dim(&self, other: &Dataset) -> Result<()> {
        if self.dim != other.dim {
            Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            })
        } else {
            Ok(())
        }
    }
}
