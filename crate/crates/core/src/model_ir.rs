//! Framework-neutral model, gradient and mask representation plus FLOPs
//! accounting over prunable layers.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "tensor data length".into(),
                expected: vec![numel],
                found: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    /// Exact widening from single precision.
    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected: self.shape.clone(),
                found: other.shape.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_id: usize,
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    /// FLOPs contributed by one nonzero weight.
    pub flops_per_weight: f64,
    pub prunable: bool,
}

impl LayerRecord {
    pub fn dim(&self) -> usize {
        self.weight.len()
    }
}

/// Binary keep-mask over one layer's weights, together with the saliency
/// order it was cut from. Zero bits are exactly `order[..pruned]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer_id: usize,
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
    pub order: Vec<usize>,
}

impl PruneMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pruned(&self) -> usize {
        self.bits.len() - self.popcount()
    }

    pub fn all_ones(layer_id: usize, shape: &[usize]) -> Self {
        let d: usize = shape.iter().product();
        Self {
            layer_id,
            shape: shape.to_vec(),
            bits: vec![true; d],
            order: (0..d).collect(),
        }
    }

    /// Rebuilds a mask from bits alone; the order lists pruned positions
    /// first, each group by ascending index.
    pub fn from_bits(layer_id: usize, shape: Vec<usize>, bits: Vec<bool>) -> Self {
        let mut order: Vec<usize> = (0..bits.len()).filter(|&j| !bits[j]).collect();
        order.extend((0..bits.len()).filter(|&j| bits[j]));
        Self {
            layer_id,
            shape,
            bits,
            order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d: usize = self.shape.iter().product();
        if self.bits.len() != d || self.order.len() != d {
            return Err(Error::InvalidBundle(format!(
                "mask for layer {} has inconsistent lengths",
                self.layer_id
            )));
        }
        let pruned = self.pruned();
        let mut seen = vec![false; d];
        for (pos, &j) in self.order.iter().enumerate() {
            if j >= d || seen[j] {
                return Err(Error::InvalidBundle(format!(
                    "mask order for layer {} is not a permutation",
                    self.layer_id
                )));
            }
            seen[j] = true;
            if (pos < pruned) == self.bits[j] {
                return Err(Error::InvalidBundle(format!(
                    "mask zeros for layer {} are not an order prefix",
                    self.layer_id
                )));
            }
        }
        Ok(())
    }

    pub fn apply(&self, weight: &mut Tensor) -> Result<()> {
        if weight.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: format!("mask for layer {}", self.layer_id),
                expected: weight.shape().to_vec(),
                found: self.shape.clone(),
            });
        }
        for (w, &keep) in weight.data_mut().iter_mut().zip(&self.bits) {
            if !keep {
                *w = 0.0;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub layers: Vec<LayerRecord>,
    pub meta: BTreeMap<String, String>,
    /// Masks carried by a pruned bundle; empty for dense models.
    #[serde(default)]
    pub masks: Vec<PruneMask>,
}

impl ModelBundle {
    pub fn new(layers: Vec<LayerRecord>, meta: BTreeMap<String, String>) -> Result<Self> {
        let bundle = Self {
            layers,
            meta,
            masks: Vec::new(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.layers.iter().any(|l| l.prunable) {
            return Err(Error::NoPrunableLayers);
        }
        let mut names = HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.layer_id != i {
                return Err(Error::InvalidBundle(format!(
                    "layer ids must be contiguous from 0; position {i} has id {}",
                    layer.layer_id
                )));
            }
            if !names.insert(layer.name.as_str()) {
                return Err(Error::InvalidBundle(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            if !(layer.flops_per_weight.is_finite() && layer.flops_per_weight >= 0.0) {
                return Err(Error::InvalidBundle(format!(
                    "layer `{}` has invalid flops_per_weight {}",
                    layer.name, layer.flops_per_weight
                )));
            }
            layer
                .weight
                .check_finite(&format!("weight of layer `{}`", layer.name))?;
        }
        for mask in &self.masks {
            let layer = self.layer(mask.layer_id).ok_or_else(|| {
                Error::InvalidBundle(format!("mask references unknown layer {}", mask.layer_id))
            })?;
            if layer.weight.shape() != mask.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("mask for layer {}", mask.layer_id),
                    expected: layer.weight.shape().to_vec(),
                    found: mask.shape.clone(),
                });
            }
            mask.validate()?;
        }
        Ok(())
    }

    pub fn layer(&self, layer_id: usize) -> Option<&LayerRecord> {
        self.layers.get(layer_id).filter(|l| l.layer_id == layer_id)
    }

    pub fn prunable(&self) -> impl Iterator<Item = &LayerRecord> {
        self.layers.iter().filter(|l| l.prunable)
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&LayerRecord> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Row-major `rows x cols` matrix; row `n` is the flattened gradient of sample `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(
                "sample matrix needs at least one row and column".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "sample matrix data".into(),
                expected: vec![rows, cols],
                found: vec![data.len()],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged sample rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.cols..(n + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.data[n * self.cols + j]
    }

    pub fn row_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for n in 0..self.rows {
            for (m, g) in mean.iter_mut().zip(self.row(n)) {
                *m += g;
            }
        }
        let inv = 1.0 / self.rows as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub layer_id: usize,
    pub avg_grad: Tensor,
    pub per_sample: Option<SampleMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub layers: Vec<LayerGradient>,
    /// (lambda_box, lambda_conf) used for the scalarized output.
    pub lambda_used: (f64, f64),
    pub n_samples: usize,
    pub meta: BTreeMap<String, String>,
}

/// Relative tolerance for the per-sample row mean against `avg_grad`.
pub const MEAN_CONSISTENCY_TOL: f64 = 1e-10;

impl GradientBundle {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidBundle("n_samples must be positive".into()));
        }
        let (lb, lc) = self.lambda_used;
        if !(lb.is_finite() && lc.is_finite() && lb >= 0.0 && lc >= 0.0) {
            return Err(Error::InvalidBundle(format!(
                "lambda must be nonnegative, got ({lb}, {lc})"
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::NoPrunableLayers);
        }
        let mut ids = HashSet::new();
        for lg in &self.layers {
            if !ids.insert(lg.layer_id) {
                return Err(Error::InvalidBundle(format!(
                    "duplicate gradient for layer {}",
                    lg.layer_id
                )));
            }
            lg.avg_grad
                .check_finite(&format!("avg_grad of layer {}", lg.layer_id))?;
            if let Some(ps) = &lg.per_sample {
                if !ps.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "per_sample_grads of layer {}",
                        lg.layer_id
                    )));
                }
                if ps.rows() != self.n_samples || ps.cols() != lg.avg_grad.len() {
                    return Err(Error::ShapeMismatch {
                        context: format!("per_sample_grads of layer {}", lg.layer_id),
                        expected: vec![self.n_samples, lg.avg_grad.len()],
                        found: vec![ps.rows(), ps.cols()],
                    });
                }
                check_mean_consistency(lg.layer_id, ps, lg.avg_grad.data())?;
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer_id: usize) -> Option<&LayerGradient> {
        self.layers.iter().find(|g| g.layer_id == layer_id)
    }
}

fn check_mean_consistency(layer_id: usize, ps: &SampleMatrix, avg: &[f64]) -> Result<()> {
    let mean = ps.row_mean();
    for j in 0..ps.cols() {
        let scale = (0..ps.rows())
            .map(|n| ps.get(n, j).abs())
            .fold(avg[j].abs(), f64::max);
        if (mean[j] - avg[j]).abs() > MEAN_CONSISTENCY_TOL * scale {
            return Err(Error::InvalidBundle(format!(
                "per-sample row mean differs from avg_grad in layer {layer_id} at index {j}"
            )));
        }
    }
    Ok(())
}

/// FLOPs of the prunable layers: `sum_i c_i * nnz_i`, where `nnz_i` is the
/// mask popcount for masked layers and the full weight count otherwise.
pub fn flops_of(bundle: &ModelBundle, masks: Option<&[PruneMask]>) -> Result<f64> {
    let masks = masks.unwrap_or(&[]);
    for mask in masks {
        let layer = bundle.layer(mask.layer_id).ok_or_else(|| {
            Error::InvalidArgument(format!("mask references unknown layer {}", mask.layer_id))
        })?;
        if layer.weight.shape() != mask.shape.as_slice() || mask.bits.len() != layer.dim() {
            return Err(Error::ShapeMismatch {
                context: format!("mask for layer {}", mask.layer_id),
                expected: layer.weight.shape().to_vec(),
                found: mask.shape.clone(),
            });
        }
    }
    Ok(bundle
        .prunable()
        .map(|layer| {
            let nnz = masks
                .iter()
                .find(|m| m.layer_id == layer.layer_id)
                .map_or(layer.dim(), PruneMask::popcount);
            layer.flops_per_weight * nnz as f64
        })
        .sum())
}

/// Dense FLOPs of the prunable layers.
pub fn dense_flops(bundle: &ModelBundle) -> f64 {
    bundle
        .prunable()
        .map(|l| l.flops_per_weight * l.dim() as f64)
        .sum()
}
