//! End-to-end pruning: scores, per-layer curves, allocation, masking,
//! optional finetuning of the reference network, and the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{
    dp_allocate, uniform_allocate, AllocLayer, AllocationResult, Budget,
};
use crate::distortion::{
    count_grid, cross_term_diagnostic, delta_curve_direct, delta_curve_incremental, fmt_real,
    CrossTermLayer, CrossTermReport, CurveMethod, DeltaMode, DistortionCurve, LayerInputs,
};
use crate::error::{Error, Result};
use crate::hessian::{empirical_fisher_with_cap, FisherMode, Kappa, DEFAULT_DENSE_CAP};
use crate::model_ir::{dense_flops, flops_of, GradientBundle, LayerGradient, LayerRecord, ModelBundle, PruneMask};
use crate::refnet::{self, CalibrationSet, FinetuneConfig, LambdaWeights, RefNet};
use crate::scoring::{mask_at_count, prune_order, taylor_scores};
use crate::stats::spearman;

/// Environment variable overriding the curve cache directory.
pub const CACHE_ENV: &str = "DMPRUNE_CACHE_DIR";

/// Trials and seed of the cross-term diagnostic.
pub const CROSS_TERM_TRIALS: usize = 100;

/// Largest per-layer pruning ratio included in the fidelity table.
pub const FIDELITY_MAX_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Grid steps per layer curve.
    pub k: usize,
    pub budget: Budget,
    pub delta_mode: DeltaMode,
    pub kappa: Kappa,
    pub fisher_mode: FisherMode,
    pub dense_cap: usize,
    pub curve_method: CurveMethod,
    /// Self-distillation after masking; only runs on reference-network
    /// bundles with a calibration set.
    pub finetune: Option<FinetuneConfig>,
    /// Adds the cross-term and fidelity diagnostics to the report.
    pub diagnostics: bool,
    pub seed: u64,
    /// When false every stage reports `wall_ms = 0` so reports are
    /// byte-reproducible.
    pub record_timings: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            k: 20,
            budget: Budget::flops_ratio(0.5),
            delta_mode: DeltaMode::Squared,
            kappa: Kappa::Auto,
            fisher_mode: FisherMode::Auto,
            dense_cap: DEFAULT_DENSE_CAP,
            curve_method: CurveMethod::Incremental,
            finetune: None,
            diagnostics: false,
            seed: 0,
            record_timings: true,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if let Kappa::Value(v) = self.kappa {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "dampening must be a nonnegative real, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One prunable layer's curve together with the saliency order it was cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub name: String,
    pub flops_per_weight: f64,
    pub kappa: f64,
    pub fisher_dense: bool,
    pub order: Vec<usize>,
    pub curve: DistortionCurve,
}

/// On-disk store of layer curves keyed by a content hash of every input.
#[derive(Debug, Clone)]
pub struct CurveCache {
    dir: PathBuf,
}

impl CurveCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$DMPRUNE_CACHE_DIR` if set, otherwise `default`.
    pub fn from_env_or(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(d) if !d.is_empty() => Self::new(d),
            _ => Self::new(default),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("curve-{key}.json"))
    }

    /// Unreadable or stale entries count as misses.
    pub fn get(&self, key: &str) -> Option<LayerCurve> {
        let bytes = fs::read(self.path(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn put(&self, key: &str, curve: &LayerCurve) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(key);
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, serde_json::to_vec(curve)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

fn hash_f64s(h: &mut Sha256, xs: &[f64]) {
    h.update((xs.len() as u64).to_le_bytes());
    for x in xs {
        h.update(x.to_le_bytes());
    }
}

fn curve_key(layer: &LayerRecord, grad: &LayerGradient, kappa: f64, config: &PruneConfig) -> String {
    let mut h = Sha256::new();
    h.update(b"dmprune-curve-v1");
    h.update((layer.layer_id as u64).to_le_bytes());
    h.update(layer.name.as_bytes());
    h.update([0]);
    for d in layer.weight.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(layer.flops_per_weight.to_le_bytes());
    hash_f64s(&mut h, layer.weight.data());
    hash_f64s(&mut h, grad.avg_grad.data());
    if let Some(ps) = &grad.per_sample {
        h.update((ps.rows() as u64).to_le_bytes());
        hash_f64s(&mut h, ps.data());
    }
    h.update((config.k as u64).to_le_bytes());
    h.update(kappa.to_le_bytes());
    let settings = serde_json::to_string(&(
        config.fisher_mode,
        config.dense_cap,
        config.curve_method,
        config.delta_mode,
    ))
    .expect("settings serialize");
    h.update(settings.as_bytes());
    hex::encode(h.finalize())
}

fn layer_curve(layer: &LayerRecord, grad: &LayerGradient, config: &PruneConfig, cache: Option<&CurveCache>) -> Result<LayerCurve> {
    let per_sample = grad
        .per_sample
        .as_ref()
        .ok_or(Error::MissingGradients(layer.layer_id))?;
    layer.weight.check_same_shape(&grad.avg_grad, &format!("gradient of layer {}", layer.name))?;
    let kappa = config.kappa.resolve(per_sample);
    let key = cache.map(|_| curve_key(layer, grad, kappa, config));
    if let (Some(c), Some(k)) = (cache, &key) {
        if let Some(hit) = c.get(k) {
            return Ok(hit);
        }
    }
    let fisher = empirical_fisher_with_cap(per_sample, kappa, config.fisher_mode, config.dense_cap)?;
    let order = prune_order(&taylor_scores(&layer.weight, &grad.avg_grad)?);
    let counts = count_grid(layer.dim(), config.k);
    let inputs = LayerInputs {
        layer_id: layer.layer_id,
        weight: &layer.weight,
        avg_grad: &grad.avg_grad,
        fisher: &fisher,
    };
    let curve = match config.curve_method {
        CurveMethod::Direct => delta_curve_direct(&inputs, &order, &counts, config.delta_mode)?,
        CurveMethod::Incremental => delta_curve_incremental(&inputs, &order, &counts, config.delta_mode)?,
    };
    let out = LayerCurve {
        name: layer.name.clone(),
        flops_per_weight: layer.flops_per_weight,
        kappa,
        fisher_dense: fisher.is_dense(),
        order,
        curve,
    };
    if let (Some(c), Some(k)) = (cache, &key) {
        c.put(k, &out)?;
    }
    Ok(out)
}

/// Curves for every prunable layer, in bundle order. Layers are processed
/// in parallel.
pub fn compute_curves(
    model: &ModelBundle,
    grads: &GradientBundle,
    config: &PruneConfig,
    cache: Option<&CurveCache>,
) -> Result<Vec<LayerCurve>> {
    config.validate()?;
    model.validate()?;
    grads.validate()?;
    let jobs = model
        .prunable()
        .map(|layer| {
            let g = grads
                .layer(layer.layer_id)
                .filter(|g| g.per_sample.is_some())
                .ok_or(Error::MissingGradients(layer.layer_id))?;
            Ok((layer, g))
        })
        .collect::<Result<Vec<_>>>()?;
    jobs.par_iter()
        .map(|(layer, g)| layer_curve(layer, g, config, cache))
        .collect()
}

pub fn allocation_layers(curves: &[LayerCurve]) -> Vec<AllocLayer> {
    curves
        .iter()
        .map(|c| AllocLayer::from_curve(&c.curve, c.name.clone(), c.flops_per_weight))
        .collect()
}

/// Masks the allocated counts out of each layer along its saliency order.
pub fn apply_allocation(
    model: &ModelBundle,
    curves: &[LayerCurve],
    allocation: &AllocationResult,
) -> Result<(ModelBundle, Vec<PruneMask>)> {
    let mut pruned = model.clone();
    let mut masks = Vec::with_capacity(allocation.layers.len());
    for a in &allocation.layers {
        let curve = curves
            .iter()
            .find(|c| c.curve.layer_id == a.layer_id)
            .ok_or_else(|| Error::InvalidArgument(format!("no curve for layer {}", a.layer_id)))?;
        let layer = pruned
            .layers
            .iter_mut()
            .find(|l| l.layer_id == a.layer_id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer {}", a.layer_id)))?;
        let mask = mask_at_count(a.layer_id, &curve.order, a.k, layer.weight.shape())?;
        mask.apply(&mut layer.weight)?;
        masks.push(mask);
    }
    pruned.masks = masks.clone();
    pruned.validate()?;
    Ok((pruned, masks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub dense: f64,
    pub pruned: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub counts: Vec<usize>,
    pub total_delta: f64,
    pub achieved_flops_ratio: f64,
}

/// Measured output distortion of the pruned reference network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredDistortion {
    pub allocated: f64,
    pub uniform: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub epochs: usize,
    pub rejected_epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub rows: usize,
    pub max_alpha: f64,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_term: Option<CrossTermReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<FidelitySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform_baseline: Option<BaselineSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_distortion: Option<MeasuredDistortion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub config: PruneConfig,
    pub stages: Vec<StageTiming>,
    pub allocation: AllocationResult,
    pub flops: FlopsSummary,
    pub diagnostics: Diagnostics,
}

impl PruneReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub pruned: ModelBundle,
    pub masks: Vec<PruneMask>,
    pub allocation: AllocationResult,
    pub report: PruneReport,
    pub curves: Vec<LayerCurve>,
}

/// Optional inputs beyond the two bundles.
#[derive(Debug, Clone, Copy, Default)]
pub struct PruneContext<'a> {
    /// Needed for measured distortion, diagnostics and finetuning.
    pub calibration: Option<&'a CalibrationSet>,
    pub cache: Option<&'a CurveCache>,
}

struct Stages {
    record: bool,
    done: Vec<StageTiming>,
}

impl Stages {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        let wall_ms = if self.record {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        self.done.push(StageTiming {
            name: name.into(),
            wall_ms,
        });
        Ok(out)
    }
}

fn lambda_of(grads: &GradientBundle) -> Result<LambdaWeights> {
    LambdaWeights::new(grads.lambda_used.0, grads.lambda_used.1)
}

pub fn run_prune(model: &ModelBundle, grads: &GradientBundle, config: &PruneConfig) -> Result<PruneOutcome> {
    run_prune_with(model, grads, config, PruneContext::default())
}

pub fn run_prune_with(
    model: &ModelBundle,
    grads: &GradientBundle,
    config: &PruneConfig,
    ctx: PruneContext<'_>,
) -> Result<PruneOutcome> {
    let mut stages = Stages {
        record: config.record_timings,
        done: Vec::new(),
    };
    let curves = stages.run("curves", || compute_curves(model, grads, config, ctx.cache))?;
    let layers = allocation_layers(&curves);
    let allocation = stages.run("allocate", || dp_allocate(&layers, config.budget))?;
    let (mut pruned, masks) = stages.run("apply_masks", || apply_allocation(model, &curves, &allocation))?;

    let mut diag = Diagnostics::default();
    let uniform = uniform_allocate(&layers, config.budget)?;
    diag.uniform_baseline = Some(BaselineSummary {
        counts: uniform.counts(),
        total_delta: uniform.total_delta,
        achieved_flops_ratio: uniform.achieved_flops_ratio,
    });

    let refnet_calib = match ctx.calibration {
        Some(c) if refnet::is_refnet_bundle(model) => Some(c),
        _ => None,
    };
    if let Some(calib) = refnet_calib {
        let lambda = lambda_of(grads)?;
        let dense = refnet::from_bundle(model)?;
        let measured = stages.run("measure", || {
            let allocated = refnet::true_distortion(&dense, &refnet::from_bundle(&pruned)?, calib, lambda)?;
            let (uni_bundle, _) = apply_allocation(model, &curves, &uniform)?;
            let uniform = refnet::true_distortion(&dense, &refnet::from_bundle(&uni_bundle)?, calib, lambda)?;
            Ok(MeasuredDistortion {
                allocated,
                uniform,
                finetuned: None,
            })
        })?;
        diag.true_distortion = Some(measured);
        if config.diagnostics {
            let (cross, fidelity) = stages.run("diagnostics", || {
                let cross = cross_term_for(model, grads, &allocation, config.seed)?;
                let rows = fidelity_table(&dense, &curves, calib, lambda, FIDELITY_MAX_ALPHA)?;
                Ok((cross, summarize_fidelity(&rows, FIDELITY_MAX_ALPHA)))
            })?;
            diag.cross_term = cross;
            diag.fidelity = Some(fidelity);
        }
    } else if config.diagnostics {
        diag.cross_term = stages.run("diagnostics", || cross_term_for(model, grads, &allocation, config.seed))?;
        diag.notes.push("fidelity diagnostic needs a reference-network bundle and calibration set".into());
    }

    if let Some(ft) = &config.finetune {
        match refnet_calib {
            Some(calib) => {
                let dense = refnet::from_bundle(model)?;
                let student = refnet::from_bundle(&pruned)?;
                let outcome = stages.run("finetune", || refnet::finetune(&student, &dense, &masks, calib, ft))?;
                let lambda = lambda_of(grads)?;
                let after = refnet::true_distortion(&dense, &outcome.net, calib, lambda)?;
                if let Some(m) = diag.true_distortion.as_mut() {
                    m.finetuned = Some(after);
                }
                diag.finetune = Some(FinetuneSummary {
                    epochs: ft.epochs,
                    rejected_epochs: outcome.rejected_epochs,
                    initial_loss: outcome.losses[0],
                    final_loss: *outcome.losses.last().unwrap(),
                    final_learning_rate: outcome.final_learning_rate,
                });
                let mut tuned = refnet::to_bundle(&outcome.net)?;
                tuned.meta = pruned.meta.clone();
                tuned.masks = masks.clone();
                tuned.validate()?;
                pruned = tuned;
            }
            None => diag.notes.push(
                "finetuning skipped: only reference-network bundles with a calibration set can be executed".into(),
            ),
        }
    }

    let dense = dense_flops(model);
    let after = flops_of(&pruned, Some(&masks))?;
    let flops = FlopsSummary {
        dense,
        pruned: after,
        ratio: if dense > 0.0 { after / dense } else { 1.0 },
    };
    let report = PruneReport {
        config: config.clone(),
        stages: stages.done,
        allocation: allocation.clone(),
        flops,
        diagnostics: diag,
    };
    Ok(PruneOutcome {
        pruned,
        masks,
        allocation,
        report,
        curves,
    })
}

/// Cross-term between the first two prunable layers at the allocation's
/// overall pruned fraction.
fn cross_term_for(
    model: &ModelBundle,
    grads: &GradientBundle,
    allocation: &AllocationResult,
    seed: u64,
) -> Result<Option<CrossTermReport>> {
    let prunable: Vec<&LayerRecord> = model.prunable().collect();
    if prunable.len() < 2 {
        return Ok(None);
    }
    let side = |l: &'_ LayerRecord| -> Result<(usize, crate::model_ir::SampleMatrix)> {
        let ps = grads
            .layer(l.layer_id)
            .and_then(|g| g.per_sample.clone())
            .ok_or(Error::MissingGradients(l.layer_id))?;
        Ok((l.layer_id, ps))
    };
    let (ia, pa) = side(prunable[0])?;
    let (ib, pb) = side(prunable[1])?;
    let d: usize = allocation.layers.iter().map(|l| l.dim).sum();
    let k: usize = allocation.layers.iter().map(|l| l.k).sum();
    let ratio = if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let report = cross_term_diagnostic(
        CrossTermLayer {
            layer_id: ia,
            weight: &prunable[0].weight,
            per_sample: &pa,
        },
        CrossTermLayer {
            layer_id: ib,
            weight: &prunable[1].weight,
            per_sample: &pb,
        },
        ratio,
        CROSS_TERM_TRIALS,
        seed,
    )?;
    Ok(Some(report))
}

/// One grid point of one layer: predicted `q^2` against the measured
/// distortion when only that layer is pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub layer_id: usize,
    pub name: String,
    pub k: usize,
    pub alpha: f64,
    pub q: f64,
    pub predicted: f64,
    pub measured: f64,
}

pub fn fidelity_table(
    net: &RefNet,
    curves: &[LayerCurve],
    calib: &CalibrationSet,
    lambda: LambdaWeights,
    max_alpha: f64,
) -> Result<Vec<FidelityRow>> {
    let points: Vec<(&LayerCurve, usize)> = curves
        .iter()
        .flat_map(|c| {
            (0..c.curve.counts.len())
                .filter(move |&j| c.curve.alphas[j] <= max_alpha)
                .map(move |j| (c, j))
        })
        .collect();
    points
        .par_iter()
        .map(|&(c, j)| {
            let k = c.curve.counts[j];
            let id = c.curve.layer_id;
            if id >= net.spec().num_layers() {
                return Err(Error::InvalidArgument(format!("layer {id} is not a refnet weight")));
            }
            let mut pruned = net.clone();
            let shape = pruned.weights()[id].shape().to_vec();
            mask_at_count(id, &c.order, k, &shape)?.apply(pruned.weight_mut(id))?;
            let q = c.curve.q[j];
            Ok(FidelityRow {
                layer_id: id,
                name: c.name.clone(),
                k,
                alpha: c.curve.alphas[j],
                q,
                predicted: q * q,
                measured: refnet::true_distortion(net, &pruned, calib, lambda)?,
            })
        })
        .collect()
}

pub fn summarize_fidelity(rows: &[FidelityRow], max_alpha: f64) -> FidelitySummary {
    let p: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.measured).collect();
    FidelitySummary {
        rows: rows.len(),
        max_alpha,
        spearman: spearman(&p, &m),
    }
}

pub fn fidelity_to_csv(rows: &[FidelityRow]) -> String {
    let mut out = String::from("layer_id,name,k,alpha,q,predicted,measured\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.layer_id,
            r.name,
            r.k,
            fmt_real(r.alpha),
            fmt_real(r.q),
            fmt_real(r.predicted),
            fmt_real(r.measured)
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub achieved_ratio: f64,
    pub total_delta: f64,
    pub true_distortion: Option<f64>,
}

/// One allocation per FLOPs ratio, reusing a single set of curves.
/// Measured distortion is included for reference-network bundles when a
/// calibration set is supplied.
pub fn pareto_sweep(
    model: &ModelBundle,
    grads: &GradientBundle,
    ratios: &[f64],
    config: &PruneConfig,
    ctx: PruneContext<'_>,
) -> Result<Vec<SweepRow>> {
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one FLOPs ratio".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::InvalidArgument(format!("FLOPs ratio must lie in (0, 1], got {r}")));
    }
    let quantum = match config.budget {
        Budget::FlopsRatio { quantum, .. } => quantum,
        Budget::PruneCount(_) => None,
    };
    let curves = compute_curves(model, grads, config, ctx.cache)?;
    let layers = allocation_layers(&curves);
    let measure = match ctx.calibration {
        Some(c) if refnet::is_refnet_bundle(model) => Some((c, refnet::from_bundle(model)?, lambda_of(grads)?)),
        _ => None,
    };
    ratios
        .iter()
        .map(|&r| {
            let alloc = dp_allocate(&layers, Budget::FlopsRatio { ratio: r, quantum })?;
            let true_distortion = match &measure {
                Some((calib, dense, lambda)) => {
                    let (pruned, _) = apply_allocation(model, &curves, &alloc)?;
                    Some(refnet::true_distortion(dense, &refnet::from_bundle(&pruned)?, calib, *lambda)?)
                }
                None => None,
            };
            Ok(SweepRow {
                r,
                achieved_ratio: alloc.achieved_flops_ratio,
                total_delta: alloc.total_delta,
                true_distortion,
            })
        })
        .collect()
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("R,achieved_ratio,total_delta,true_distortion\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_real(r.r),
            fmt_real(r.achieved_ratio),
            fmt_real(r.total_delta),
            r.true_distortion.map(fmt_real).unwrap_or_default()
        ));
    }
    out
}
