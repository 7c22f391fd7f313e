//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dmprune_core::allocator::{brute_force_allocate, dp_allocate, Budget};
use dmprune_core::distortion::{
    count_grid, curves_to_csv, delta_curve_direct, delta_curve_incremental, DeltaMode, LayerInputs,
};
use dmprune_core::dmb::{self, Bundle};
use dmprune_core::hessian::{auto_kappa, empirical_fisher, FisherMode};
use dmprune_core::pipeline::{
    allocation_layers, compute_curves, fidelity_table, fidelity_to_csv, run_prune_with, summarize_fidelity,
    PruneConfig, PruneContext, FIDELITY_MAX_ALPHA,
};
use dmprune_core::refnet::{self, FinetuneConfig, LambdaWeights, RefNet, RefNetSpec};
use dmprune_core::scoring::{prune_order, taylor_scores};
use dmprune_core::stats::linear_fit;
use dmprune_core::verify::{explicit_fisher, random_budget, random_instance, random_sparse};
use dmprune_core::{CalibrationSet, GradientBundle, ModelBundle, SampleMatrix, Tensor};

const SEED: u64 = 42;
const CALIB_SAMPLES: usize = 32;
const GRID_STEPS: usize = 20;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn archive_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).expect("create archive dir");
    dir
}

struct Desk {
    net: RefNet,
    model: ModelBundle,
    calib: CalibrationSet,
    grads: GradientBundle,
}

fn desk() -> Desk {
    let spec = RefNetSpec::desk_default(SEED);
    let net = RefNet::init(spec.clone()).unwrap();
    let calib = refnet::synth_calibration(&spec, CALIB_SAMPLES, SEED + 1).unwrap();
    let grads = refnet::build_gradient_bundle(&net, &calib, LambdaWeights::default()).unwrap();
    let model = refnet::to_bundle(&net).unwrap();
    Desk {
        net,
        model,
        calib,
        grads,
    }
}

fn config(budget: Budget) -> PruneConfig {
    PruneConfig {
        k: GRID_STEPS,
        budget,
        record_timings: false,
        ..PruneConfig::default()
    }
}

fn dp_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0;
    for t in 0..200 {
        let layers = random_instance(&mut rng, 4, 8);
        let budget = random_budget(&mut rng, &layers, t % 2 == 1);
        let dp = dp_allocate(&layers, budget).unwrap();
        let bf = brute_force_allocate(&layers, budget).unwrap();
        if dp.total_delta != bf.total_delta {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("{mismatches} of 200 instances differ from brute force; {:.2}s", elapsed.as_secs_f64()),
    )
}

fn random_layer(rng: &mut ChaCha8Rng, d: usize, n: usize) -> (Tensor, Tensor, SampleMatrix) {
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = SampleMatrix::new(n, d, g).unwrap();
    let avg = Tensor::new(vec![d], grads.row_mean()).unwrap();
    (Tensor::new(vec![d], w).unwrap(), avg, grads)
}

fn incremental_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let d = rng.random_range(16..=512);
        let n = rng.random_range(1..=32);
        let (w, g, grads) = random_layer(&mut rng, d, n);
        let fisher = empirical_fisher(&grads, auto_kappa(&grads), FisherMode::Dense).unwrap();
        let order = prune_order(&taylor_scores(&w, &g).unwrap());
        let counts = count_grid(d, 16);
        let inputs = LayerInputs {
            layer_id: 0,
            weight: &w,
            avg_grad: &g,
            fisher: &fisher,
        };
        let inc = delta_curve_incremental(&inputs, &order, &counts, DeltaMode::Squared).unwrap();
        let dir = delta_curve_direct(&inputs, &order, &counts, DeltaMode::Squared).unwrap();
        for (a, b) in inc.q.iter().zip(&dir.q) {
            let scale = a.abs().max(b.abs());
            if scale > 0.0 {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(30),
        format!("max relative deviation {worst:.3e}; {:.2}s", elapsed.as_secs_f64()),
    )
}

fn fisher_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let (mut elem, mut prod): (f64, f64) = (0.0, 0.0);
    for (d, n) in [(40, 8), (120, 32), (300, 5)] {
        let (_, _, grads) = random_layer(&mut rng, d, n);
        let kappa = auto_kappa(&grads);
        let dense = empirical_fisher(&grads, kappa, FisherMode::Dense).unwrap();
        let factor = empirical_fisher(&grads, kappa, FisherMode::Factor).unwrap();
        let explicit = explicit_fisher(&grads, kappa);
        for a in 0..d {
            for b in 0..d {
                elem = elem.max((dense.get(a, b) - explicit[a * d + b]).abs());
            }
        }
        for _ in 0..1000 {
            let u = random_sparse(&mut rng, d, 32);
            let v = random_sparse(&mut rng, d, 32);
            let scale = (factor.quad_form(&u).unwrap() * factor.quad_form(&v).unwrap()).sqrt();
            let diff = (dense.cross_form(&u, &v).unwrap() - factor.cross_form(&u, &v).unwrap()).abs();
            if scale > 0.0 {
                prod = prod.max(diff / scale);
            } else if diff > 0.0 {
                prod = f64::INFINITY;
            }
        }
    }
    outcome(
        elem <= 1e-12 && prod <= 1e-10,
        format!("elementwise {elem:.3e}; product agreement {prod:.3e} over 3000 pairs"),
    )
}

fn gradcheck() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in [1u64, 2, 3] {
        let spec = RefNetSpec::desk_default(seed);
        let net = RefNet::init(spec.clone()).unwrap();
        let x = &refnet::synth_calibration(&spec, 1, seed + 100).unwrap().inputs[0];
        let lambda = LambdaWeights::new(1.0, 1.0).unwrap();
        let r = refnet::gradcheck(&net, x, lambda, 1e-5).unwrap();
        worst = worst.max(r.max_rel());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(60),
        format!("max relative error {worst:.3e} over 3 seeds; {:.2}s", elapsed.as_secs_f64()),
    )
}

fn fidelity(d: &Desk) -> Outcome {
    let curves = compute_curves(&d.model, &d.grads, &config(Budget::flops_ratio(0.5)), None).unwrap();
    let rows = fidelity_table(&d.net, &curves, &d.calib, LambdaWeights::default(), FIDELITY_MAX_ALPHA).unwrap();
    let path = archive_dir().join("fidelity.csv");
    fs::write(&path, fidelity_to_csv(&rows)).unwrap();
    let s = summarize_fidelity(&rows, FIDELITY_MAX_ALPHA);
    let rho = s.spearman.unwrap_or(f64::NAN);
    outcome(
        rho >= 0.8,
        format!("spearman {rho:.4} over {} points; table at {}", s.rows, path.display()),
    )
}

fn end_to_end(d: &Desk) -> Outcome {
    let mut wins = 0;
    let mut ratio_ok = true;
    let mut parts = Vec::new();
    for r in [0.7, 0.5, 0.3] {
        let ctx = PruneContext {
            calibration: Some(&d.calib),
            cache: None,
        };
        let out = run_prune_with(&d.model, &d.grads, &config(Budget::flops_ratio(r)), ctx).unwrap();
        let m = out.report.diagnostics.true_distortion.clone().unwrap();
        let achieved = out.allocation.achieved_flops_ratio;
        let slack = out.allocation.quantum.unwrap() / out.report.flops.dense;
        ratio_ok &= achieved <= r + slack;
        if m.allocated <= m.uniform {
            wins += 1;
        }
        parts.push(format!(
            "R={r}: ratio {achieved:.4}, dp {:.4}, uniform {:.4}",
            m.allocated, m.uniform
        ));
    }
    outcome(
        ratio_ok && wins >= 2,
        format!("{wins}/3 at or below uniform; {}", parts.join("; ")),
    )
}

fn finetune_recovery(d: &Desk) -> Outcome {
    let out = run_prune_with(
        &d.model,
        &d.grads,
        &config(Budget::flops_ratio(0.5)),
        PruneContext::default(),
    )
    .unwrap();
    let pruned = refnet::from_bundle(&out.pruned).unwrap();
    let lambda = LambdaWeights::default();
    let ft = FinetuneConfig {
        epochs: 50,
        ..FinetuneConfig::default()
    };
    let tuned = refnet::finetune(&pruned, &d.net, &out.masks, &d.calib, &ft).unwrap();
    let before = refnet::true_distortion(&d.net, &pruned, &d.calib, lambda).unwrap();
    let after = refnet::true_distortion(&d.net, &tuned.net, &d.calib, lambda).unwrap();
    // Fresh inputs from the same generator; reported only.
    let held_out = refnet::synth_calibration(d.net.spec(), CALIB_SAMPLES, SEED + 1000).unwrap();
    let hb = refnet::true_distortion(&d.net, &pruned, &held_out, lambda).unwrap();
    let ha = refnet::true_distortion(&d.net, &tuned.net, &held_out, lambda).unwrap();
    let reduction = 1.0 - after / before;
    outcome(
        reduction >= 0.5,
        format!(
            "calibration {before:.4} -> {after:.4} ({:.1}% reduction); held-out {hb:.4} -> {ha:.4}",
            100.0 * reduction
        ),
    )
}

fn min_time(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn complexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let dims = [64usize, 128, 256, 512];
    let mut times = Vec::new();
    for &d in &dims {
        let (w, g, grads) = random_layer(&mut rng, d, 16);
        let fisher = empirical_fisher(&grads, auto_kappa(&grads), FisherMode::Dense).unwrap();
        let order = prune_order(&taylor_scores(&w, &g).unwrap());
        let counts = count_grid(d, 16);
        let inputs = LayerInputs {
            layer_id: 0,
            weight: &w,
            avg_grad: &g,
            fisher: &fisher,
        };
        let reps = 20;
        times.push(min_time(7, || {
            for _ in 0..reps {
                std::hint::black_box(delta_curve_incremental(&inputs, &order, &counts, DeltaMode::Squared).unwrap());
            }
        }));
    }
    let lx: Vec<f64> = dims.iter().map(|&d| (d as f64).ln()).collect();
    let ly: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let exponent = linear_fit(&lx, &ly).unwrap().slope;

    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let layers: Vec<_> = (0..8)
        .map(|i| {
            let dim = 16384;
            let counts = count_grid(dim, 20);
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
            dmprune_core::AllocLayer {
                layer_id: i,
                name: format!("l{i}"),
                dim,
                flops_per_weight: 1.0,
                counts,
                delta,
            }
        })
        .collect();
    let ladder: Vec<usize> = (1..=8).map(|j| j * 8192).collect();
    // Rounds interleave the ladder so transient load spreads across all points.
    let mut dp_times = vec![f64::INFINITY; ladder.len()];
    for _ in 0..15 {
        for (slot, &t) in dp_times.iter_mut().zip(&ladder) {
            let start = Instant::now();
            std::hint::black_box(dp_allocate(&layers, Budget::PruneCount(t)).unwrap());
            *slot = slot.min(start.elapsed().as_secs_f64());
        }
    }
    let tx: Vec<f64> = ladder.iter().map(|&t| t as f64).collect();
    let r2 = linear_fit(&tx, &dp_times).unwrap().r_squared;
    outcome(
        exponent <= 2.3 && r2 >= 0.95,
        format!("curve time exponent {exponent:.3}; DP time linear fit R^2 {r2:.4}"),
    )
}

/// The demo chain through files; returns the text artifacts by name.
fn chain(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let spec = RefNetSpec::desk_default(SEED);
    let net = RefNet::init(spec.clone()).unwrap();
    let calib = refnet::synth_calibration(&spec, CALIB_SAMPLES, SEED + 1).unwrap();
    dmb::save_bundle(&Bundle::Model(refnet::to_bundle(&net).unwrap()), dir.join("model.dmb")).unwrap();
    dmb::save_bundle(&Bundle::Calibration(calib), dir.join("calib.dmb")).unwrap();

    let model = dmb::load_model(dir.join("model.dmb")).unwrap();
    let calib = dmb::load_calibration(dir.join("calib.dmb")).unwrap();
    let grads =
        refnet::build_gradient_bundle(&refnet::from_bundle(&model).unwrap(), &calib, LambdaWeights::default()).unwrap();
    dmb::save_bundle(&Bundle::Gradient(grads), dir.join("grads.dmb")).unwrap();
    let grads = dmb::load_gradients(dir.join("grads.dmb")).unwrap();

    let cfg = config(Budget::flops_ratio(0.5));
    let curves = compute_curves(&model, &grads, &cfg, None).unwrap();
    let raw: Vec<_> = curves.iter().map(|c| c.curve.clone()).collect();
    fs::write(dir.join("curves.csv"), curves_to_csv(&raw)).unwrap();
    let alloc = dp_allocate(&allocation_layers(&curves), cfg.budget).unwrap();
    fs::write(dir.join("allocation.json"), serde_json::to_string_pretty(&alloc).unwrap()).unwrap();
    let out = run_prune_with(&model, &grads, &cfg, PruneContext::default()).unwrap();
    dmb::save_bundle(&Bundle::Model(out.pruned), dir.join("pruned.dmb")).unwrap();
    fs::write(dir.join("report.json"), out.report.to_json().unwrap()).unwrap();

    ["model.dmb", "calib.dmb", "grads.dmb", "curves.csv", "allocation.json", "pruned.dmb", "report.json"]
        .iter()
        .map(|n| (n.to_string(), fs::read(dir.join(n)).unwrap()))
        .collect()
}

fn reproducibility() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = chain(a.path());
    let second = chain(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", first.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.passed {
            failed += 1;
        }
    };
    report("dp_optimality", &dp_optimality);
    report("incremental_equivalence", &incremental_equivalence);
    report("fisher_oracle", &fisher_oracle);
    report("gradcheck", &gradcheck);
    let d = desk();
    report("approximation_fidelity", &|| fidelity(&d));
    report("end_to_end_dominance", &|| end_to_end(&d));
    report("finetune_recovery", &|| finetune_recovery(&d));
    report("complexity", &complexity);
    report("reproducibility", &reproducibility);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
