//! Runtime oracle suite: recomputes every stage from first principles and
//! compares against the fast paths on the supplied bundles.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{brute_force_allocate, dp_allocate, AllocLayer, Budget};
use crate::distortion::{count_grid, delta_curve_direct, delta_curve_incremental, DeltaMode, LayerInputs};
use crate::error::Result;
use crate::hessian::{empirical_fisher, FisherMode, DEFAULT_DENSE_CAP};
use crate::model_ir::{dense_flops, flops_of, GradientBundle, ModelBundle, SampleMatrix};
use crate::pipeline::{
    allocation_layers, compute_curves, fidelity_table, run_prune, summarize_fidelity, PruneConfig,
    FIDELITY_MAX_ALPHA,
};
use crate::refnet::{self, CalibrationSet, LambdaWeights};
use crate::scoring::{prune_order, taylor_scores};
use crate::sparse::SparseVec;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-6;
pub const FISHER_ELEMENT_TOL: f64 = 1e-12;
pub const FISHER_PRODUCT_TOL: f64 = 1e-10;
pub const INCREMENTAL_TOL: f64 = 1e-9;
pub const FIDELITY_MIN_SPEARMAN: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }

    fn push_result(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.push(name, ok, detail),
            Err(e) => self.push(name, false, format!("error: {e}")),
        }
    }
}

/// `kappa * I + (1/N) sum_n g_n g_n^T` by explicit outer products.
pub fn explicit_fisher(grads: &SampleMatrix, kappa: f64) -> Vec<f64> {
    let d = grads.cols();
    let mut m = vec![0.0; d * d];
    for n in 0..grads.rows() {
        let g = grads.row(n);
        for a in 0..d {
            for b in 0..d {
                m[a * d + b] += g[a] * g[b];
            }
        }
    }
    for (i, v) in m.iter_mut().enumerate() {
        *v /= grads.rows() as f64;
        if i / d == i % d {
            *v += kappa;
        }
    }
    m
}

pub fn random_sparse(rng: &mut impl Rng, d: usize, max_nnz: usize) -> SparseVec {
    let nnz = rng.random_range(0..=d.min(max_nnz));
    let idx = index::sample(rng, d, nnz);
    SparseVec::from_pairs(d, idx.into_iter().map(|j| (j, rng.random_range(-2.0..2.0))))
        .expect("sampled indices are unique")
}

/// Random allocation instance: up to `max_layers` layers with nonnegative
/// curves on grids of at most `max_k + 1` points.
pub fn random_instance(rng: &mut impl Rng, max_layers: usize, max_k: usize) -> Vec<AllocLayer> {
    let l = rng.random_range(1..=max_layers);
    (0..l)
        .map(|i| {
            let dim = rng.random_range(20..=60);
            let k = rng.random_range(1..=max_k);
            let counts = count_grid(dim, k);
            let mut delta: Vec<f64> = counts.iter().map(|_| rng.random_range(0.0..10.0)).collect();
            delta[0] = 0.0;
            AllocLayer {
                layer_id: i,
                name: format!("l{i}"),
                dim,
                flops_per_weight: rng.random_range(1..=40) as f64,
                counts,
                delta,
            }
        })
        .collect()
}

/// Random budget that the instance can meet.
pub fn random_budget(rng: &mut impl Rng, layers: &[AllocLayer], flops: bool) -> Budget {
    if flops {
        Budget::FlopsRatio {
            ratio: rng.random_range(0.05..=1.0),
            quantum: None,
        }
    } else {
        let cap: usize = layers.iter().map(|l| *l.counts.last().unwrap()).sum();
        Budget::PruneCount(rng.random_range(0..=cap))
    }
}

fn max_rel_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
}

/// Inputs to the suite. Gradients and calibration are optional; checks that
/// need them are skipped when absent.
pub struct VerifyInputs<'a> {
    pub model: &'a ModelBundle,
    pub grads: Option<&'a GradientBundle>,
    pub calibration: Option<&'a CalibrationSet>,
    pub config: &'a PruneConfig,
    pub seed: u64,
}

pub fn run_suite(inputs: &VerifyInputs<'_>) -> VerifyReport {
    let mut report = VerifyReport::default();
    let model = inputs.model;
    report.push_result("model_bundle", model.validate().map(|_| (true, format!("{} layers", model.layers.len()))));
    let mut rng = ChaCha8Rng::seed_from_u64(inputs.seed);

    report.push_result("dp_vs_brute_force", (|| {
        let mut worst = 0usize;
        for t in 0..50 {
            let layers = random_instance(&mut rng, 4, 8);
            let budget = random_budget(&mut rng, &layers, t % 2 == 1);
            let dp = dp_allocate(&layers, budget)?;
            let bf = brute_force_allocate(&layers, budget)?;
            if dp.total_delta != bf.total_delta {
                worst += 1;
            }
        }
        Ok((worst == 0, format!("{worst} of 50 random instances differ")))
    })());

    let is_refnet = refnet::is_refnet_bundle(model);
    if let (true, Some(calib)) = (is_refnet, inputs.calibration) {
        report.push_result("gradcheck", (|| {
            let net = refnet::from_bundle(model)?;
            let lambda = inputs
                .grads
                .map(|g| LambdaWeights::new(g.lambda_used.0, g.lambda_used.1))
                .transpose()?
                .unwrap_or_default();
            let r = refnet::gradcheck(&net, &calib.inputs[0], lambda, GRADCHECK_STEP)?;
            Ok((
                r.max_rel() <= GRADCHECK_TOL,
                format!("max relative error {:.3e} over {} weights", r.max_rel(), r.checked_weights),
            ))
        })());
        if let Some(grads) = inputs.grads {
            report.push_result("gradient_bundle_recompute", (|| {
                let net = refnet::from_bundle(model)?;
                let lambda = LambdaWeights::new(grads.lambda_used.0, grads.lambda_used.1)?;
                let fresh = refnet::build_gradient_bundle(&net, calib, lambda)?;
                let mut dev: f64 = 0.0;
                for lg in &fresh.layers {
                    let stored = grads.layer(lg.layer_id).ok_or(crate::Error::MissingGradients(lg.layer_id))?;
                    dev = dev.max(max_rel_dev(lg.avg_grad.data(), stored.avg_grad.data()));
                }
                Ok((dev <= 1e-12, format!("max relative deviation {dev:.3e}")))
            })());
        }
    }

    let Some(grads) = inputs.grads else {
        report.push("gradient_bundle", true, "no gradient bundle supplied; stage checks skipped".into());
        return report;
    };
    report.push_result("gradient_bundle", grads.validate().map(|_| (true, format!("{} samples", grads.n_samples))));

    report.push_result("fisher_oracle", (|| {
        let (mut elem, mut prod) = (0.0f64, 0.0f64);
        for layer in model.prunable() {
            let Some(ps) = grads.layer(layer.layer_id).and_then(|g| g.per_sample.as_ref()) else {
                continue;
            };
            if layer.dim() > DEFAULT_DENSE_CAP {
                continue;
            }
            let kappa = inputs.config.kappa.resolve(ps);
            let dense = empirical_fisher(ps, kappa, FisherMode::Dense)?;
            let factor = empirical_fisher(ps, kappa, FisherMode::Factor)?;
            let d = layer.dim();
            if d <= 1024 {
                let explicit = explicit_fisher(ps, kappa);
                for a in 0..d {
                    for b in 0..d {
                        elem = elem.max((dense.get(a, b) - explicit[a * d + b]).abs());
                    }
                }
            }
            for _ in 0..100 {
                let u = random_sparse(&mut rng, d, 64);
                let v = random_sparse(&mut rng, d, 64);
                let scale = (factor.quad_form(&u)? * factor.quad_form(&v)?).sqrt().max(1e-300);
                let diff = (dense.cross_form(&u, &v)? - factor.cross_form(&u, &v)?).abs();
                prod = prod.max(diff / scale);
            }
        }
        Ok((
            elem <= FISHER_ELEMENT_TOL && prod <= FISHER_PRODUCT_TOL,
            format!("elementwise {elem:.3e}, product agreement {prod:.3e}"),
        ))
    })());

    report.push_result("incremental_vs_direct", (|| {
        let mut worst: f64 = 0.0;
        for layer in model.prunable() {
            let Some(g) = grads.layer(layer.layer_id) else { continue };
            let Some(ps) = g.per_sample.as_ref() else { continue };
            let fisher = empirical_fisher(ps, inputs.config.kappa.resolve(ps), inputs.config.fisher_mode)?;
            let order = prune_order(&taylor_scores(&layer.weight, &g.avg_grad)?);
            let counts = count_grid(layer.dim(), inputs.config.k);
            let li = LayerInputs {
                layer_id: layer.layer_id,
                weight: &layer.weight,
                avg_grad: &g.avg_grad,
                fisher: &fisher,
            };
            let inc = delta_curve_incremental(&li, &order, &counts, DeltaMode::Squared)?;
            let dir = delta_curve_direct(&li, &order, &counts, DeltaMode::Squared)?;
            worst = worst.max(max_rel_dev(&inc.q, &dir.q));
        }
        Ok((worst <= INCREMENTAL_TOL, format!("max relative deviation of q {worst:.3e}")))
    })());

    report.push_result("model_dp_vs_brute_force", (|| {
        let curves = compute_curves(model, grads, inputs.config, None)?;
        let layers = allocation_layers(&curves);
        let space: u128 = layers.iter().map(|l| l.counts.len() as u128).product();
        if space > crate::allocator::BRUTE_FORCE_LIMIT {
            return Ok((true, format!("skipped: {space} grid combinations")));
        }
        let budget = inputs.config.budget;
        let dp = dp_allocate(&layers, budget)?;
        let bf = brute_force_allocate(&layers, budget)?;
        Ok((
            dp.total_delta == bf.total_delta,
            format!("dp {:e}, brute force {:e}", dp.total_delta, bf.total_delta),
        ))
    })());

    report.push_result("prune_consistency", (|| {
        let out = run_prune(model, grads, inputs.config)?;
        for m in &out.masks {
            let w = &out.pruned.layer(m.layer_id).expect("masked layer exists").weight;
            let zeros_ok = w.data().iter().zip(&m.bits).all(|(v, keep)| *keep || *v == 0.0);
            if !zeros_ok {
                return Ok((false, format!("layer {} has weights outside its mask", m.layer_id)));
            }
        }
        let ratio = flops_of(&out.pruned, Some(&out.masks))? / dense_flops(model);
        let dev = (ratio - out.report.flops.ratio).abs();
        Ok((dev <= 1e-12, format!("FLOPs ratio {ratio:.6}, report deviation {dev:.1e}")))
    })());

    if let (true, Some(calib)) = (is_refnet, inputs.calibration) {
        report.push_result("fidelity", (|| {
            let net = refnet::from_bundle(model)?;
            let lambda = LambdaWeights::new(grads.lambda_used.0, grads.lambda_used.1)?;
            let squared = PruneConfig {
                delta_mode: DeltaMode::Squared,
                ..inputs.config.clone()
            };
            let curves = compute_curves(model, grads, &squared, None)?;
            let rows = fidelity_table(&net, &curves, calib, lambda, FIDELITY_MAX_ALPHA)?;
            let s = summarize_fidelity(&rows, FIDELITY_MAX_ALPHA);
            let rho = s.spearman.unwrap_or(f64::NAN);
            Ok((rho >= FIDELITY_MIN_SPEARMAN, format!("spearman {rho:.4} over {} points", s.rows)))
        })());
    }
    report
}
