//! Empirical-Fisher surrogate for a layer's Hessian,
//! `kappa * I + (1/N) * sum_n g_n g_n^T`, either materialized (dense) or kept
//! as the per-sample gradient factor with products evaluated lazily.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::SampleMatrix;
use crate::sparse::SparseVec;

/// Largest layer dimension materialized densely by default.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Scale applied to the mean Fisher diagonal for the automatic dampening.
pub const AUTO_KAPPA_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FisherMode {
    /// Dense up to the cap, factor above it.
    #[default]
    Auto,
    Dense,
    Factor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kappa {
    #[default]
    Auto,
    Value(f64),
}

impl Kappa {
    pub fn resolve(self, grads: &SampleMatrix) -> f64 {
        match self {
            Kappa::Auto => auto_kappa(grads),
            Kappa::Value(v) => v,
        }
    }
}

/// `1e-6 * mean(diag(G^T G / N))`.
pub fn auto_kappa(grads: &SampleMatrix) -> f64 {
    let n = grads.rows() as f64;
    let trace: f64 = grads.data().iter().map(|g| g * g).sum::<f64>() / n;
    AUTO_KAPPA_SCALE * trace / grads.cols() as f64
}

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Dense(Vec<f64>),
    Factor(SampleMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherMatrix {
    dim: usize,
    kappa: f64,
    n_samples: usize,
    repr: Repr,
}

pub fn empirical_fisher(grads: &SampleMatrix, kappa: f64, mode: FisherMode) -> Result<FisherMatrix> {
    empirical_fisher_with_cap(grads, kappa, mode, DEFAULT_DENSE_CAP)
}

pub fn empirical_fisher_with_cap(
    grads: &SampleMatrix,
    kappa: f64,
    mode: FisherMode,
    dense_cap: usize,
) -> Result<FisherMatrix> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("per-sample gradients".into()));
    }
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "dampening must be a nonnegative real, got {kappa}"
        )));
    }
    let dim = grads.cols();
    let n = grads.rows();
    let dense = match mode {
        FisherMode::Dense if dim > dense_cap => {
            return Err(Error::InvalidArgument(format!(
                "dense Fisher requested for dimension {dim} above cap {dense_cap}"
            )))
        }
        FisherMode::Dense => true,
        FisherMode::Factor => false,
        FisherMode::Auto => dim <= dense_cap,
    };
    let repr = if dense {
        let inv_n = 1.0 / n as f64;
        let mut m = vec![0.0; dim * dim];
        for s in 0..n {
            let g = grads.row(s);
            for a in 0..dim {
                let ga = g[a];
                if ga == 0.0 {
                    continue;
                }
                let row = &mut m[a * dim..(a + 1) * dim];
                for b in a..dim {
                    row[b] += ga * g[b];
                }
            }
        }
        for a in 0..dim {
            for b in a..dim {
                let v = m[a * dim + b] * inv_n;
                m[a * dim + b] = v;
                m[b * dim + a] = v;
            }
            m[a * dim + a] += kappa;
        }
        Repr::Dense(m)
    } else {
        Repr::Factor(grads.clone())
    };
    Ok(FisherMatrix {
        dim,
        kappa,
        n_samples: n,
        repr,
    })
}

impl FisherMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.repr, Repr::Dense(_))
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        match &self.repr {
            Repr::Dense(m) => m[a * self.dim + b],
            Repr::Factor(g) => {
                let s: f64 = (0..g.rows()).map(|n| g.get(n, a) * g.get(n, b)).sum();
                s / self.n_samples as f64 + if a == b { self.kappa } else { 0.0 }
            }
        }
    }

    /// `v^T F v`, never negative.
    pub fn quad_form(&self, v: &SparseVec) -> Result<f64> {
        Ok(self.cross_form(v, v)?.max(0.0))
    }

    /// `u^T F v` over the supports of `u` and `v`.
    pub fn cross_form(&self, u: &SparseVec, v: &SparseVec) -> Result<f64> {
        u.check_dim(self.dim)?;
        v.check_dim(self.dim)?;
        if u.nnz() == 0 || v.nnz() == 0 {
            return Ok(0.0);
        }
        Ok(match &self.repr {
            Repr::Dense(m) => u
                .iter()
                .map(|(a, ua)| {
                    let row = &m[a * self.dim..(a + 1) * self.dim];
                    ua * v.iter().map(|(b, vb)| row[b] * vb).sum::<f64>()
                })
                .sum(),
            Repr::Factor(g) => {
                let mut acc = 0.0;
                for n in 0..g.rows() {
                    let row = g.row(n);
                    acc += u.dot_dense(row) * v.dot_dense(row);
                }
                self.kappa * u.dot(v) + acc / self.n_samples as f64
            }
        })
    }
}
