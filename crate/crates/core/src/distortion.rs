//! Per-layer distortion curves.
//!
//! For a layer with averaged gradient `g`, Fisher `F` and perturbation `dW`
//! at pruned count `k`, the signed second-order term is
//! `q(k) = g^T dW + 0.5 * dW^T F dW` and the curve value is `q(k)^2`
//! (or `|q(k)|`). The incremental evaluator walks the nested count grid and
//! only touches the newly pruned coordinates `s` at each step:
//!
//! ```text
//! q(k) = q(k-1) + g'^T s + 0.5 * s^T F' s + dW(k-1)^T F' s
//! ```

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::FisherMatrix;
use crate::model_ir::{SampleMatrix, Tensor};
use crate::scoring::{perturbation_at_count, sigma_subvector, Perturbation};
use crate::sparse::SparseVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    #[default]
    Squared,
    Abs,
}

impl DeltaMode {
    pub fn apply(self, q: f64) -> f64 {
        match self {
            DeltaMode::Squared => q * q,
            DeltaMode::Abs => q.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveMethod {
    Direct,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionCurve {
    pub layer_id: usize,
    /// Number of weights in the layer.
    pub dim: usize,
    pub counts: Vec<usize>,
    pub alphas: Vec<f64>,
    pub q: Vec<f64>,
    pub delta: Vec<f64>,
    pub method: CurveMethod,
    pub mode: DeltaMode,
}

impl DistortionCurve {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Borrowed per-layer inputs shared by both evaluators.
#[derive(Debug, Clone, Copy)]
pub struct LayerInputs<'a> {
    pub layer_id: usize,
    pub weight: &'a Tensor,
    pub avg_grad: &'a Tensor,
    pub fisher: &'a FisherMatrix,
}

impl LayerInputs<'_> {
    fn check(&self) -> Result<()> {
        self.weight.check_same_shape(self.avg_grad, "averaged gradient")?;
        if self.fisher.dim() != self.weight.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weight.len(),
                found: self.fisher.dim(),
            });
        }
        Ok(())
    }
}

/// Counts `round(j * d / k)` for `j = 0..=k`, deduplicated.
pub fn count_grid(d: usize, k: usize) -> Vec<usize> {
    assert!(k > 0, "grid needs at least one step");
    let mut counts: Vec<usize> = (0..=k)
        .map(|j| ((j as f64 * d as f64) / k as f64).round() as usize)
        .collect();
    counts.dedup();
    counts
}

fn check_counts(counts: &[usize], d: usize) -> Result<()> {
    if counts.first() != Some(&0) {
        return Err(Error::InvalidArgument("count grid must start at 0".into()));
    }
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "count grid must be strictly increasing".into(),
        ));
    }
    if let Some(&last) = counts.last() {
        if last > d {
            return Err(Error::CountOutOfRange { count: last, max: d });
        }
    }
    Ok(())
}

/// `g^T dW + 0.5 * dW^T F dW`, evaluated from scratch.
pub fn q_direct(avg_grad: &Tensor, fisher: &FisherMatrix, perturbation: &Perturbation) -> Result<f64> {
    avg_grad.check_same_shape(&perturbation.delta, "perturbation")?;
    let dw = perturbation.to_sparse();
    let first = dw.dot_dense(avg_grad.data());
    Ok(first + 0.5 * fisher.quad_form(&dw)?)
}

fn build_curve(
    inputs: &LayerInputs<'_>,
    counts: &[usize],
    q: Vec<f64>,
    method: CurveMethod,
    mode: DeltaMode,
) -> DistortionCurve {
    let d = inputs.weight.len();
    DistortionCurve {
        layer_id: inputs.layer_id,
        dim: d,
        counts: counts.to_vec(),
        alphas: counts.iter().map(|&k| k as f64 / d as f64).collect(),
        delta: q.iter().map(|&v| mode.apply(v)).collect(),
        q,
        method,
        mode,
    }
}

pub fn delta_curve_direct(
    inputs: &LayerInputs<'_>,
    order: &[usize],
    counts: &[usize],
    mode: DeltaMode,
) -> Result<DistortionCurve> {
    inputs.check()?;
    check_counts(counts, inputs.weight.len())?;
    let q = counts
        .iter()
        .map(|&k| {
            let p = perturbation_at_count(inputs.weight, order, k)?;
            q_direct(inputs.avg_grad, inputs.fisher, &p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(build_curve(inputs, counts, q, CurveMethod::Direct, mode))
}

/// Per-step contributions of the incremental update, kept for inspection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    pub first_order: f64,
    pub self_quadratic: f64,
    pub cross: f64,
}

pub fn delta_curve_incremental(
    inputs: &LayerInputs<'_>,
    order: &[usize],
    counts: &[usize],
    mode: DeltaMode,
) -> Result<DistortionCurve> {
    let (curve, _) = delta_curve_incremental_terms(inputs, order, counts, mode)?;
    Ok(curve)
}

pub fn delta_curve_incremental_terms(
    inputs: &LayerInputs<'_>,
    order: &[usize],
    counts: &[usize],
    mode: DeltaMode,
) -> Result<(DistortionCurve, Vec<StepTerms>)> {
    inputs.check()?;
    let d = inputs.weight.len();
    check_counts(counts, d)?;
    let g = inputs.avg_grad.data();
    let mut q = Vec::with_capacity(counts.len());
    let mut terms = Vec::with_capacity(counts.len().saturating_sub(1));
    q.push(0.0);
    let mut accumulated = SparseVec::zeros(d);
    let mut current = 0.0;
    for pair in counts.windows(2) {
        let sigma = sigma_subvector(inputs.weight, order, pair[0], pair[1])?.to_sparse(d);
        let step = StepTerms {
            first_order: sigma.dot_dense(g),
            self_quadratic: 0.5 * inputs.fisher.quad_form(&sigma)?,
            cross: inputs.fisher.cross_form(&accumulated, &sigma)?,
        };
        current += step.first_order + step.self_quadratic + step.cross;
        q.push(current);
        terms.push(step);
        accumulated.add_assign(&sigma)?;
    }
    Ok((build_curve(inputs, counts, q, CurveMethod::Incremental, mode), terms))
}

/// Curve rows as `layer_id,k,alpha,q,delta` CSV with 17 significant digits.
pub fn curves_to_csv(curves: &[DistortionCurve]) -> String {
    let mut out = String::from("layer_id,k,alpha,q,delta\n");
    for c in curves {
        for i in 0..c.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.layer_id,
                c.counts[i],
                fmt_real(c.alphas[i]),
                fmt_real(c.q[i]),
                fmt_real(c.delta[i])
            ));
        }
    }
    out
}

/// Scientific notation with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// One side of the cross-term diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct CrossTermLayer<'a> {
    pub layer_id: usize,
    pub weight: &'a Tensor,
    pub per_sample: &'a SampleMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTermReport {
    pub layer_a: usize,
    pub layer_b: usize,
    pub ratio: f64,
    pub trials: usize,
    pub seed: u64,
    /// Mean over trials and samples of `(g_a^T dW_a) * (g_b^T dW_b)`.
    pub mean_cross: f64,
    pub mean_self_a: f64,
    pub mean_self_b: f64,
    /// `mean_cross / sqrt(mean_self_a * mean_self_b)`, or 0 when either is 0.
    pub normalized: f64,
}

/// Empirical first cross-term between two layers under random masks at a
/// matched pruning ratio.
pub fn cross_term_diagnostic(
    a: CrossTermLayer<'_>,
    b: CrossTermLayer<'_>,
    ratio: f64,
    trials: usize,
    seed: u64,
) -> Result<CrossTermReport> {
    if a.layer_id == b.layer_id {
        return Err(Error::InvalidArgument(
            "cross-term diagnostic needs two distinct layers".into(),
        ));
    }
    if !(0.0..=1.0).contains(&ratio) || trials == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio must lie in [0, 1] and trials be positive (got {ratio}, {trials})"
        )));
    }
    for side in [&a, &b] {
        if side.per_sample.cols() != side.weight.len() {
            return Err(Error::DimensionMismatch {
                expected: side.weight.len(),
                found: side.per_sample.cols(),
            });
        }
    }
    let n = a.per_sample.rows();
    if b.per_sample.rows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.per_sample.rows(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |side: &CrossTermLayer<'_>| -> SparseVec {
        let d = side.weight.len();
        let k = crate::scoring::count_for_ratio(ratio, d);
        let picked = index::sample(&mut rng, d, k);
        SparseVec::from_pairs(d, picked.into_iter().map(|j| (j, -side.weight.data()[j])))
            .expect("sampled indices are unique")
    };
    let (mut cross, mut self_a, mut self_b) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        let da = draw(&a);
        let db = draw(&b);
        for s in 0..n {
            let pa = da.dot_dense(a.per_sample.row(s));
            let pb = db.dot_dense(b.per_sample.row(s));
            cross += pa * pb;
            self_a += pa * pa;
            self_b += pb * pb;
        }
    }
    let scale = (trials * n) as f64;
    let (cross, self_a, self_b) = (cross / scale, self_a / scale, self_b / scale);
    let denom = (self_a * self_b).sqrt();
    Ok(CrossTermReport {
        layer_a: a.layer_id,
        layer_b: b.layer_id,
        ratio,
        trials,
        seed,
        mean_cross: cross,
        mean_self_a: self_a,
        mean_self_b: self_b,
        normalized: if denom > 0.0 { cross / denom } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hessian::{empirical_fisher, FisherMode};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    fn diag_fisher(diag: &[f64]) -> FisherMatrix {
        // Rows sqrt(N * d_j) e_j give diag(d) exactly for these inputs.
        let n = diag.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut r = vec![0.0; n];
                r[j] = (n as f64 * diag[j]).sqrt();
                r
            })
            .collect();
        empirical_fisher(&SampleMatrix::from_rows(&rows).unwrap(), 0.0, FisherMode::Dense).unwrap()
    }

    #[test]
    fn grid() {
        assert_eq!(count_grid(10, 4), vec![0, 3, 5, 8, 10]);
        assert_eq!(count_grid(2, 4), vec![0, 1, 2]);
        assert_eq!(count_grid(1, 1), vec![0, 1]);
    }

    #[test]
    fn q_direct_examples() {
        let f = diag_fisher(&[1.0]);
        let w = t(&[2.0]);
        let p = perturbation_at_count(&w, &[0], 1).unwrap();
        assert_eq!(q_direct(&t(&[0.5]), &f, &p).unwrap(), 1.0);
        let p0 = perturbation_at_count(&w, &[0], 0).unwrap();
        assert_eq!(q_direct(&t(&[0.5]), &f, &p0).unwrap(), 0.0);

        let zero = empirical_fisher(
            &SampleMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            0.0,
            FisherMode::Dense,
        )
        .unwrap();
        let p = perturbation_at_count(&t(&[1.0, 1.0]), &[0, 1], 2).unwrap();
        assert_eq!(q_direct(&t(&[1.0, 1.0]), &zero, &p).unwrap(), -2.0);
    }

    #[test]
    fn single_weight_curve() {
        let f = diag_fisher(&[1.0]);
        let (w, g) = (t(&[2.0]), t(&[0.5]));
        let inputs = LayerInputs { layer_id: 0, weight: &w, avg_grad: &g, fisher: &f };
        for curve in [
            delta_curve_direct(&inputs, &[0], &[0, 1], DeltaMode::Squared).unwrap(),
            delta_curve_incremental(&inputs, &[0], &[0, 1], DeltaMode::Squared).unwrap(),
        ] {
            assert_eq!(curve.counts, vec![0, 1]);
            assert_eq!(curve.q, vec![0.0, 1.0]);
            assert_eq!(curve.delta, vec![0.0, 1.0]);
        }
    }

    #[test]
    fn two_weight_incremental_terms() {
        // Step 2 adds s = [0, -1]: first-order -1, self 0.5 * 1 * 2 = 1,
        // cross (-2) * F[0][1] * (-1) = 0, so q stays at 1. Direct
        // evaluation at k = 2 agrees: 0.5*(-2) + 1*(-1) + 0.5*(4 + 2) = 1.
        // diag(1, 2) built exactly as kappa = 1 plus one sample [0, 1].
        let rows = SampleMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let f = empirical_fisher(&rows, 1.0, FisherMode::Dense).unwrap();
        let (w, g) = (t(&[2.0, 1.0]), t(&[0.5, 1.0]));
        let inputs = LayerInputs { layer_id: 0, weight: &w, avg_grad: &g, fisher: &f };
        let (curve, terms) =
            delta_curve_incremental_terms(&inputs, &[0, 1], &[0, 1, 2], DeltaMode::Squared).unwrap();
        assert_eq!(terms[0].cross, 0.0);
        assert_eq!(terms[1].first_order, -1.0);
        assert_eq!(terms[1].self_quadratic, 1.0);
        assert_eq!(terms[1].cross, 0.0);
        assert_eq!(curve.q, vec![0.0, 1.0, 1.0]);
        let direct = delta_curve_direct(&inputs, &[0, 1], &[0, 1, 2], DeltaMode::Squared).unwrap();
        assert_eq!(direct.q, curve.q);
    }

    #[test]
    fn zero_inputs_give_flat_curve() {
        let f = empirical_fisher(
            &SampleMatrix::from_rows(&[vec![0.0; 4]]).unwrap(),
            0.0,
            FisherMode::Factor,
        )
        .unwrap();
        let (w, g) = (t(&[1.0, -3.0, 2.0, 0.5]), t(&[0.0; 4]));
        let inputs = LayerInputs { layer_id: 0, weight: &w, avg_grad: &g, fisher: &f };
        let c = delta_curve_incremental(&inputs, &[0, 1, 2, 3], &[0, 2, 4], DeltaMode::Abs).unwrap();
        assert!(c.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_grids() {
        let f = diag_fisher(&[1.0, 1.0]);
        let (w, g) = (t(&[1.0, 1.0]), t(&[1.0, 1.0]));
        let inputs = LayerInputs { layer_id: 0, weight: &w, avg_grad: &g, fisher: &f };
        assert!(delta_curve_incremental(&inputs, &[0, 1], &[0, 2, 1], DeltaMode::Squared).is_err());
        assert!(delta_curve_incremental(&inputs, &[0, 1], &[1, 2], DeltaMode::Squared).is_err());
        assert!(delta_curve_incremental(&inputs, &[0, 1], &[0, 3], DeltaMode::Squared).is_err());
    }

    #[test]
    fn csv_format() {
        let c = DistortionCurve {
            layer_id: 3,
            dim: 2,
            counts: vec![0, 2],
            alphas: vec![0.0, 1.0],
            q: vec![0.0, -0.5],
            delta: vec![0.0, 0.25],
            method: CurveMethod::Incremental,
            mode: DeltaMode::Squared,
        };
        let csv = curves_to_csv(&[c]);
        assert_eq!(
            csv,
            "layer_id,k,alpha,q,delta\n\
             3,0,0.0000000000000000e0,0.0000000000000000e0,0.0000000000000000e0\n\
             3,2,1.0000000000000000e0,-5.0000000000000000e-1,2.5000000000000000e-1\n"
        );
    }

    #[test]
    fn cross_term_edge_cases() {
        let wa = t(&[1.0, 2.0]);
        let wb = t(&[3.0, 4.0]);
        let ga = SampleMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let gb = SampleMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, -1.0]]).unwrap();
        let a = CrossTermLayer { layer_id: 0, weight: &wa, per_sample: &ga };
        let b = CrossTermLayer { layer_id: 1, weight: &wb, per_sample: &gb };
        let r = cross_term_diagnostic(a, b, 0.5, 20, 3).unwrap();
        assert_eq!(r.mean_cross, 0.0);
        assert_eq!(r.normalized, 0.0);
        let none = cross_term_diagnostic(a, b, 0.0, 5, 3).unwrap();
        assert_eq!(none.normalized, 0.0);
        assert!(cross_term_diagnostic(a, a, 0.5, 5, 3).is_err());
    }
}
