//! Synthetic inputs shared by the benchmarks.

use dmprune_core::allocator::AllocLayer;
use dmprune_core::distortion::count_grid;
use dmprune_core::hessian::{auto_kappa, empirical_fisher, FisherMatrix, FisherMode};
use dmprune_core::scoring::{prune_order, taylor_scores};
use dmprune_core::{SampleMatrix, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SyntheticLayer {
    pub weight: Tensor,
    pub avg_grad: Tensor,
    pub fisher: FisherMatrix,
    pub order: Vec<usize>,
}

/// Random layer of `d` weights with `n` per-sample gradients.
pub fn synthetic_layer(d: usize, n: usize, mode: FisherMode, seed: u64) -> SyntheticLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = SampleMatrix::new(n, d, g).expect("consistent sizes");
    let weight = Tensor::new(vec![d], w).expect("consistent sizes");
    let avg_grad = Tensor::new(vec![d], grads.row_mean()).expect("consistent sizes");
    let fisher = empirical_fisher(&grads, auto_kappa(&grads), mode).expect("finite input");
    let order = prune_order(&taylor_scores(&weight, &avg_grad).expect("same shape"));
    SyntheticLayer {
        weight,
        avg_grad,
        fisher,
        order,
    }
}

/// `layers` random nonnegative curves with `k + 1` grid points over `dim` weights.
pub fn synthetic_alloc(layers: usize, dim: usize, k: usize, seed: u64) -> Vec<AllocLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..layers)
        .map(|i| {
            let counts = count_grid(dim, k);
            let mut acc = 0.0;
            let delta = counts
                .iter()
                .enumerate()
                .map(|(j, _)| {
                    if j > 0 {
                        acc += rng.random_range(0.0..1.0);
                    }
                    acc
                })
                .collect();
            AllocLayer {
                layer_id: i,
                name: format!("layer{i}"),
                dim,
                flops_per_weight: rng.random_range(1..=8) as f64,
                counts,
                delta,
            }
        })
        .collect()
}
