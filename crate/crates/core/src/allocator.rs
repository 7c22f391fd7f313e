//! Layerwise sparsity allocation over per-layer distortion curves.
//!
//! Each layer contributes one grid point `k_i` from its curve. Pruning `k_i`
//! weights removes `u_i(k_i)` budget units (weights in count mode, FLOPs
//! quanta in FLOPs mode). The solvers minimize `sum_i delta_i(k_i)` subject
//! to `sum_i u_i(k_i) >= U`. DP states saturate at `U`, so the table has
//! `U + 1` columns per layer.

use serde::{Deserialize, Serialize};

use crate::distortion::DistortionCurve;
use crate::error::{Error, Result};

/// Largest product of grid sizes the exhaustive oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Default cap on FLOPs-mode budget units.
pub const MAX_BUDGET_UNITS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    WeightCount,
    FlopsRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Prune at least this many weights in total.
    PruneCount(usize),
    /// Keep at most this fraction of the prunable FLOPs.
    FlopsRatio { ratio: f64, quantum: Option<f64> },
}

impl Budget {
    pub fn flops_ratio(ratio: f64) -> Self {
        Budget::FlopsRatio {
            ratio,
            quantum: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetSpec {
    Count(usize),
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Dp,
    BruteForce,
    Uniform,
}

/// Allocation input for one layer: its curve plus naming and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocLayer {
    pub layer_id: usize,
    pub name: String,
    pub dim: usize,
    pub flops_per_weight: f64,
    pub counts: Vec<usize>,
    pub delta: Vec<f64>,
}

impl AllocLayer {
    pub fn from_curve(curve: &DistortionCurve, name: impl Into<String>, flops_per_weight: f64) -> Self {
        Self {
            layer_id: curve.layer_id,
            name: name.into(),
            dim: curve.dim,
            flops_per_weight,
            counts: curve.counts.clone(),
            delta: curve.delta.clone(),
        }
    }

    /// Unit cost per weight, for count-mode use without a model.
    pub fn unit_cost(curve: &DistortionCurve) -> Self {
        Self::from_curve(curve, format!("layer{}", curve.layer_id), 1.0)
    }

    fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.len() != self.delta.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {} has an empty or ragged curve",
                self.layer_id
            )));
        }
        if self.counts[0] != 0 || self.delta[0] != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "curve of layer {} must start at count 0 with zero distortion",
                self.layer_id
            )));
        }
        if self.counts.windows(2).any(|w| w[0] >= w[1]) || *self.counts.last().unwrap() > self.dim {
            return Err(Error::InvalidArgument(format!(
                "curve counts of layer {} must increase within 0..={}",
                self.layer_id, self.dim
            )));
        }
        if self.delta.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "curve of layer {} has negative or non-finite distortion",
                self.layer_id
            )));
        }
        if !(self.flops_per_weight.is_finite() && self.flops_per_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer {} has invalid cost {}",
                self.layer_id, self.flops_per_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub layer_id: usize,
    pub name: String,
    #[serde(rename = "D")]
    pub dim: usize,
    pub k: usize,
    pub alpha: f64,
    pub delta: f64,
    pub grid_index: usize,
}

/// One backtracking step: the DP state entered at this layer and the
/// argmin that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStep {
    pub layer_id: usize,
    pub state: usize,
    pub grid_index: usize,
    pub parent_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub solver: Solver,
    pub budget_mode: BudgetMode,
    pub budget_spec: BudgetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantum: Option<f64>,
    pub required_units: usize,
    pub layers: Vec<LayerAllocation>,
    pub total_delta: f64,
    pub achieved_flops_ratio: f64,
    #[serde(default)]
    pub traceback: Vec<TraceStep>,
}

impl AllocationResult {
    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.k).collect()
    }
}

struct Problem {
    mode: BudgetMode,
    spec: BudgetSpec,
    quantum: Option<f64>,
    units: Vec<Vec<usize>>,
    required: usize,
}

/// Rounds `x` to the nearest integer when it is within floating noise of it.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

fn total_flops(layers: &[AllocLayer]) -> f64 {
    layers.iter().map(|l| l.dim as f64 * l.flops_per_weight).sum()
}

/// Default FLOPs quantum: the smallest positive per-weight cost, divided by
/// the smallest integer that brings it under 1% of the total, then coarsened
/// so the total budget spans at most `MAX_BUDGET_UNITS` units.
pub fn default_quantum(layers: &[AllocLayer]) -> Option<f64> {
    let min_c = layers
        .iter()
        .map(|l| l.flops_per_weight)
        .filter(|&c| c > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !min_c.is_finite() {
        return None;
    }
    let total = total_flops(layers);
    let split = (min_c / (0.01 * total)).ceil().max(1.0);
    Some((min_c / split).max(total / MAX_BUDGET_UNITS))
}

fn build_problem(layers: &[AllocLayer], budget: Budget) -> Result<Problem> {
    if layers.is_empty() {
        return Err(Error::NoPrunableLayers);
    }
    for l in layers {
        l.validate()?;
    }
    match budget {
        Budget::PruneCount(t) => {
            let capacity: usize = layers.iter().map(|l| *l.counts.last().unwrap()).sum();
            if t > capacity {
                return Err(Error::Infeasible(format!(
                    "cannot prune {t} weights; the curves reach at most {capacity}"
                )));
            }
            Ok(Problem {
                mode: BudgetMode::WeightCount,
                spec: BudgetSpec::Count(t),
                quantum: None,
                units: layers.iter().map(|l| l.counts.clone()).collect(),
                required: t,
            })
        }
        Budget::FlopsRatio { ratio, quantum } => {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "FLOPs ratio must lie in (0, 1], got {ratio}"
                )));
            }
            let total = total_flops(layers);
            if total <= 0.0 {
                return Err(Error::InvalidArgument(
                    "prunable layers carry no FLOPs".into(),
                ));
            }
            let q = match quantum {
                Some(q) if q.is_finite() && q > 0.0 => q,
                Some(q) => {
                    return Err(Error::InvalidArgument(format!(
                        "quantum must be positive, got {q}"
                    )))
                }
                None => default_quantum(layers).expect("total FLOPs are positive"),
            };
            if q > 0.01 * total {
                return Err(Error::InvalidArgument(format!(
                    "quantum {q} is coarser than 1% of total FLOPs {total}"
                )));
            }
            // Units under-count removed FLOPs, so meeting the unit target
            // always meets the real target.
            let units: Vec<Vec<usize>> = layers
                .iter()
                .map(|l| {
                    l.counts
                        .iter()
                        .map(|&k| snap(k as f64 * l.flops_per_weight / q).floor() as usize)
                        .collect()
                })
                .collect();
            let required = snap((total - ratio * total) / q).ceil().max(0.0) as usize;
            let capacity: usize = units.iter().map(|u| *u.last().unwrap()).sum();
            if required > capacity {
                return Err(Error::Infeasible(format!(
                    "FLOPs ratio {ratio} unreachable even when pruning every grid maximum"
                )));
            }
            Ok(Problem {
                mode: BudgetMode::FlopsRatio,
                spec: BudgetSpec::Ratio(ratio),
                quantum: Some(q),
                units,
                required,
            })
        }
    }
}

fn finish(
    layers: &[AllocLayer],
    problem: &Problem,
    solver: Solver,
    picks: &[usize],
    traceback: Vec<TraceStep>,
) -> AllocationResult {
    let mut total_delta = 0.0;
    let mut remaining = 0.0;
    let allocations = layers
        .iter()
        .zip(picks)
        .map(|(l, &idx)| {
            let k = l.counts[idx];
            total_delta += l.delta[idx];
            remaining += (l.dim - k) as f64 * l.flops_per_weight;
            LayerAllocation {
                layer_id: l.layer_id,
                name: l.name.clone(),
                dim: l.dim,
                k,
                alpha: k as f64 / l.dim as f64,
                delta: l.delta[idx],
                grid_index: idx,
            }
        })
        .collect();
    let total = total_flops(layers);
    let achieved_flops_ratio = if total > 0.0 {
        remaining / total
    } else {
        let d: usize = layers.iter().map(|l| l.dim).sum();
        let k: usize = layers.iter().zip(picks).map(|(l, &i)| l.counts[i]).sum();
        (d - k) as f64 / d as f64
    };
    AllocationResult {
        solver,
        budget_mode: problem.mode,
        budget_spec: problem.spec,
        quantum: problem.quantum,
        required_units: problem.required,
        layers: allocations,
        total_delta,
        achieved_flops_ratio,
        traceback,
    }
}

/// Exact DP over the grid with saturating states and a full argmin table.
fn solve_dp(layers: &[AllocLayer], problem: &Problem) -> Result<(Vec<usize>, Vec<TraceStep>)> {
    let cap = problem.required;
    let width = cap + 1;
    let mut g_prev = vec![f64::INFINITY; width];
    g_prev[0] = 0.0;
    // (grid index, parent state) per (layer, state)
    let mut choice: Vec<Vec<(u32, u32)>> = Vec::with_capacity(layers.len());
    let mut suffix: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); width];

    for (layer, units) in layers.iter().zip(&problem.units) {
        // suffix[j] = min over j' >= j of g_prev[j'], earliest argmin.
        let mut best = (f64::INFINITY, cap);
        for j in (0..width).rev() {
            if g_prev[j] <= best.0 {
                best = (g_prev[j], j);
            }
            suffix[j] = best;
        }
        let mut g_next = vec![f64::INFINITY; width];
        let mut row = vec![(u32::MAX, u32::MAX); width];
        for j in 0..width {
            let mut best_val = f64::INFINITY;
            let mut best_pick = (u32::MAX, u32::MAX);
            for (idx, (&u, &d)) in units.iter().zip(&layer.delta).enumerate() {
                let (prev_val, parent) = if j < cap {
                    if u > j {
                        continue;
                    }
                    (g_prev[j - u], j - u)
                } else {
                    suffix[cap.saturating_sub(u)]
                };
                let cand = prev_val + d;
                if cand < best_val {
                    best_val = cand;
                    best_pick = (idx as u32, parent as u32);
                }
            }
            g_next[j] = best_val;
            row[j] = best_pick;
        }
        choice.push(row);
        g_prev = g_next;
    }

    if !g_prev[cap].is_finite() {
        return Err(Error::Infeasible("no grid allocation meets the budget".into()));
    }
    let mut picks = vec![0; layers.len()];
    let mut trace = Vec::with_capacity(layers.len());
    let mut state = cap;
    for i in (0..layers.len()).rev() {
        let (idx, parent) = choice[i][state];
        picks[i] = idx as usize;
        trace.push(TraceStep {
            layer_id: layers[i].layer_id,
            state,
            grid_index: idx as usize,
            parent_state: parent as usize,
        });
        state = parent as usize;
    }
    debug_assert_eq!(state, 0);
    trace.reverse();
    Ok((picks, trace))
}

fn allocate(layers: &[AllocLayer], budget: Budget) -> Result<AllocationResult> {
    let problem = build_problem(layers, budget)?;
    let (picks, trace) = solve_dp(layers, &problem)?;
    Ok(finish(layers, &problem, Solver::Dp, &picks, trace))
}

/// Minimizes total distortion subject to pruning at least `t` weights.
pub fn dp_allocate_counts(layers: &[AllocLayer], t: usize) -> Result<AllocationResult> {
    allocate(layers, Budget::PruneCount(t))
}

/// Minimizes total distortion subject to keeping at most `ratio` of the
/// prunable FLOPs.
pub fn dp_allocate_flops(layers: &[AllocLayer], ratio: f64, quantum: Option<f64>) -> Result<AllocationResult> {
    allocate(layers, Budget::FlopsRatio { ratio, quantum })
}

pub fn dp_allocate(layers: &[AllocLayer], budget: Budget) -> Result<AllocationResult> {
    allocate(layers, budget)
}

/// Exhaustive enumeration over the product grid. Ties resolve toward the
/// smaller grid index at the later layer, as in the DP backtrack.
pub fn brute_force_allocate(layers: &[AllocLayer], budget: Budget) -> Result<AllocationResult> {
    let problem = build_problem(layers, budget)?;
    let space: u128 = layers.iter().map(|l| l.counts.len() as u128).product();
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchTooLarge(space));
    }
    let sizes: Vec<usize> = layers.iter().map(|l| l.counts.len()).collect();
    let mut idx = vec![0usize; layers.len()];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let units: usize = idx.iter().zip(&problem.units).map(|(&i, u)| u[i]).sum();
        if units >= problem.required {
            let total = idx
                .iter()
                .zip(layers)
                .fold(0.0, |acc, (&i, l)| acc + l.delta[i]);
            let better = match &best {
                None => true,
                Some((bt, bi)) => total < *bt || (total == *bt && idx.iter().rev().lt(bi.iter().rev())),
            };
            if better {
                best = Some((total, idx.clone()));
            }
        }
        // odometer over layer grids
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                let (_, picks) = best.ok_or_else(|| Error::Infeasible("no grid allocation meets the budget".into()))?;
                return Ok(finish(layers, &problem, Solver::BruteForce, &picks, Vec::new()));
            }
            idx[pos] += 1;
            if idx[pos] < sizes[pos] {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Same relative grid position in every layer: the first position `j` (of
/// the longest grid) whose uniform pick meets the budget.
pub fn uniform_allocate(layers: &[AllocLayer], budget: Budget) -> Result<AllocationResult> {
    let problem = build_problem(layers, budget)?;
    let steps = layers.iter().map(|l| l.counts.len() - 1).max().unwrap_or(0);
    for j in 0..=steps {
        let picks: Vec<usize> = layers
            .iter()
            .map(|l| {
                let n = l.counts.len() - 1;
                if steps == 0 {
                    0
                } else {
                    ((j * n) as f64 / steps as f64).round() as usize
                }
            })
            .collect();
        let units: usize = picks.iter().zip(&problem.units).map(|(&i, u)| u[i]).sum();
        if units >= problem.required {
            return Ok(finish(layers, &problem, Solver::Uniform, &picks, Vec::new()));
        }
    }
    Err(Error::Infeasible("uniform allocation cannot meet the budget".into()))
}
