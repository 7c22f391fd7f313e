use crate::error::{Error, Result};

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVec {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVec {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from unordered `(index, value)` pairs. Duplicate indices are rejected.
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let mut pairs: Vec<(usize, f64)> = pairs.into_iter().collect();
        pairs.sort_unstable_by_key(|&(j, _)| j);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::InvalidArgument(format!(
                    "duplicate sparse index {}",
                    w[0].0
                )));
            }
        }
        if let Some(&(j, _)) = pairs.last() {
            if j >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: j + 1,
                });
            }
        }
        let (indices, values) = pairs.into_iter().unzip();
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, &v)| (j, v))
            .unzip();
        Self {
            dim: dense.len(),
            indices,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Dot product with a dense vector.
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(j, v)| v * dense[j]).sum()
    }

    /// Merge-based dot product; symmetric in its arguments.
    pub fn dot(&self, other: &SparseVec) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// Adds `other` into `self`; supports overlapping supports.
    pub fn add_assign(&mut self, other: &SparseVec) -> Result<()> {
        self.check_dim(other.dim)?;
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.nnz() + other.nnz());
        let (mut a, mut b) = (0, 0);
        while a < self.nnz() || b < other.nnz() {
            let take_a = b >= other.nnz() || (a < self.nnz() && self.indices[a] < other.indices[b]);
            let take_b = a >= self.nnz() || (b < other.nnz() && other.indices[b] < self.indices[a]);
            if take_a {
                merged.push((self.indices[a], self.values[a]));
                a += 1;
            } else if take_b {
                merged.push((other.indices[b], other.values[b]));
                b += 1;
            } else {
                merged.push((self.indices[a], self.values[a] + other.values[b]));
                a += 1;
                b += 1;
            }
        }
        (self.indices, self.values) = merged.into_iter().unzip();
        Ok(())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (j, v) in self.iter() {
            out[j] = v;
        }
        out
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim == dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: dim,
                found: self.dim,
            })
        }
    }
}
