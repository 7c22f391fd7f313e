//! Taylor saliency scores and the nested mask family derived from them.
//!
//! Every mask, perturbation and subvector here is cut from one saliency
//! order, so the pruned set at count `k` is always a prefix of the pruned
//! set at any larger count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{PruneMask, Tensor};
use crate::sparse::SparseVec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTensor {
    pub values: Tensor,
}

/// `|w * g|` elementwise.
pub fn taylor_scores(weight: &Tensor, avg_grad: &Tensor) -> Result<ScoreTensor> {
    weight.check_same_shape(avg_grad, "taylor score gradient")?;
    let values = weight
        .data()
        .iter()
        .zip(avg_grad.data())
        .map(|(w, g)| (w * g).abs())
        .collect();
    let values = Tensor::new(weight.shape().to_vec(), values)?;
    values.check_finite("taylor scores")?;
    Ok(ScoreTensor { values })
}

/// Flat indices sorted by ascending score, ties by ascending index.
pub fn prune_order(scores: &ScoreTensor) -> Vec<usize> {
    let s = scores.values.data();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    order
}

/// Pruned count for a ratio: `round(alpha * d)`.
pub fn count_for_ratio(alpha: f64, d: usize) -> usize {
    ((alpha.clamp(0.0, 1.0) * d as f64).round() as usize).min(d)
}

fn check_count(k: usize, d: usize) -> Result<()> {
    if k > d {
        Err(Error::CountOutOfRange { count: k, max: d })
    } else {
        Ok(())
    }
}

fn check_order(order: &[usize], d: usize) -> Result<()> {
    if order.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: order.len(),
        });
    }
    Ok(())
}

pub fn mask_at_count(layer_id: usize, order: &[usize], k: usize, shape: &[usize]) -> Result<PruneMask> {
    let d: usize = shape.iter().product();
    check_order(order, d)?;
    check_count(k, d)?;
    let mut bits = vec![true; d];
    for &j in &order[..k] {
        bits[j] = false;
    }
    Ok(PruneMask {
        layer_id,
        shape: shape.to_vec(),
        bits,
        order: order.to_vec(),
    })
}

/// `delta = W * M - W`, nonzero only on the first `k` entries of the order.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub support: Vec<usize>,
}

impl Perturbation {
    pub fn to_sparse(&self) -> SparseVec {
        let d = self.delta.data();
        SparseVec::from_pairs(d.len(), self.support.iter().map(|&j| (j, d[j])))
            .expect("support is unique and in range")
    }
}

pub fn perturbation_at_count(weight: &Tensor, order: &[usize], k: usize) -> Result<Perturbation> {
    check_order(order, weight.len())?;
    check_count(k, weight.len())?;
    let w = weight.data();
    let mut delta = vec![0.0; w.len()];
    let mut support = order[..k].to_vec();
    support.sort_unstable();
    for &j in &support {
        delta[j] = -w[j];
    }
    Ok(Perturbation {
        delta: Tensor::new(weight.shape().to_vec(), delta)?,
        support,
    })
}

/// Newly pruned coordinates between two counts, in saliency order.
#[derive(Debug, Clone, PartialEq)]
pub struct Subvector {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Subvector {
    pub fn to_sparse(&self, dim: usize) -> SparseVec {
        SparseVec::from_pairs(dim, self.indices.iter().copied().zip(self.values.iter().copied()))
            .expect("subvector indices are unique")
    }
}

pub fn sigma_subvector(weight: &Tensor, order: &[usize], k_prev: usize, k_next: usize) -> Result<Subvector> {
    check_order(order, weight.len())?;
    check_count(k_next, weight.len())?;
    if k_prev > k_next {
        return Err(Error::InvalidArgument(format!(
            "subvector counts must be nondecreasing, got {k_prev} > {k_next}"
        )));
    }
    let indices = order[k_prev..k_next].to_vec();
    let values = indices.iter().map(|&j| -weight.data()[j]).collect();
    Ok(Subvector { indices, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn scores_elementwise() {
        let s = taylor_scores(&t(&[1.0, -2.0, 3.0]), &t(&[0.5, 0.1, 0.0])).unwrap();
        let got = s.values.data();
        assert_eq!(got[0], 0.5);
        assert!((got[1] - 0.2).abs() < 1e-15);
        assert_eq!(got[2], 0.0);
        let z = taylor_scores(&t(&[1.0, 2.0]), &t(&[0.0, 0.0])).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert_eq!(taylor_scores(&t(&[-4.0]), &t(&[-0.25])).unwrap().values.data(), &[1.0]);
        assert!(taylor_scores(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn order_and_ties() {
        let score = |v: &[f64]| ScoreTensor { values: t(v) };
        assert_eq!(prune_order(&score(&[0.5, 0.2, 0.9])), vec![1, 0, 2]);
        assert_eq!(prune_order(&score(&[0.3, 0.3])), vec![0, 1]);
        assert_eq!(prune_order(&score(&[0.0, 0.0, 0.0])), vec![0, 1, 2]);
    }

    #[test]
    fn masks() {
        let order = [1, 0, 2];
        assert_eq!(mask_at_count(0, &order, 1, &[3]).unwrap().bits, vec![true, false, true]);
        assert_eq!(mask_at_count(0, &order, 0, &[3]).unwrap().bits, vec![true; 3]);
        assert_eq!(mask_at_count(0, &order, 3, &[3]).unwrap().bits, vec![false; 3]);
        assert!(matches!(
            mask_at_count(0, &order, 4, &[3]),
            Err(Error::CountOutOfRange { .. })
        ));
    }

    #[test]
    fn perturbations() {
        let w = t(&[1.0, -2.0, 3.0]);
        let order = [1, 0, 2];
        assert_eq!(perturbation_at_count(&w, &order, 1).unwrap().delta.data(), &[0.0, 2.0, 0.0]);
        assert!(perturbation_at_count(&w, &order, 0).unwrap().support.is_empty());
        assert_eq!(perturbation_at_count(&w, &order, 3).unwrap().delta.data(), &[-1.0, 2.0, -3.0]);
        assert!(perturbation_at_count(&w, &order, 4).is_err());
    }

    #[test]
    fn subvectors() {
        let w = t(&[1.0, -2.0, 3.0]);
        let order = [1, 0, 2];
        let s = sigma_subvector(&w, &order, 1, 2).unwrap();
        assert_eq!((s.indices, s.values), (vec![0], vec![-1.0]));
        assert!(sigma_subvector(&w, &order, 2, 2).unwrap().indices.is_empty());
        assert!(sigma_subvector(&w, &order, 2, 1).is_err());
        let mut acc = vec![0.0; 3];
        for k in 1..=3 {
            let s = sigma_subvector(&w, &order, k - 1, k).unwrap();
            for (j, v) in s.indices.iter().zip(&s.values) {
                acc[*j] += v;
            }
        }
        assert_eq!(acc, vec![-1.0, 2.0, -3.0]);
    }

    proptest! {
        #[test]
        fn nesting_and_telescoping(
            w in prop::collection::vec(-5.0f64..5.0, 1..40),
            g_seed in prop::collection::vec(-1.0f64..1.0, 40),
            cuts in prop::collection::vec(0usize..40, 0..6),
        ) {
            let d = w.len();
            let weight = t(&w);
            let grad = t(&g_seed[..d]);
            let order = prune_order(&taylor_scores(&weight, &grad).unwrap());
            let mut counts: Vec<usize> = cuts.into_iter().map(|c| c % (d + 1)).collect();
            counts.push(0);
            counts.push(d);
            counts.sort_unstable();
            counts.dedup();

            let mut acc = vec![0.0; d];
            let mut prev_pruned: Vec<bool> = vec![false; d];
            for pair in counts.windows(2) {
                let s = sigma_subvector(&weight, &order, pair[0], pair[1]).unwrap();
                for (j, v) in s.indices.iter().zip(&s.values) {
                    acc[*j] += v;
                }
                let p = perturbation_at_count(&weight, &order, pair[1]).unwrap();
                prop_assert_eq!(p.delta.data(), acc.as_slice());
                let m = mask_at_count(0, &order, pair[1], &[d]).unwrap();
                for (was, bit) in prev_pruned.iter().zip(&m.bits) {
                    if *was {
                        prop_assert!(!bit);
                    }
                }
                prev_pruned = m.bits.iter().map(|b| !b).collect();
                m.validate().unwrap();
            }
        }

        #[test]
        fn order_is_deterministic(s in prop::collection::vec(0.0f64..2.0, 1..30)) {
            let st = ScoreTensor { values: t(&s) };
            let a = prune_order(&st);
            prop_assert_eq!(&a, &prune_order(&st));
            for w in a.windows(2) {
                prop_assert!(s[w[0]] < s[w[1]] || (s[w[0]] == s[w[1]] && w[0] < w[1]));
            }
        }
    }
}
