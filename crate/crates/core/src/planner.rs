//! Depth/capacity co-planning over terraced layer plans.
//!
//! A plan is scored by the simulated cost of one client round and admitted
//! when its probe accuracy stays within `epsilon_acc` of the all-Full plan.
//! The search grows the frozen prefix first, then the bias-only band above
//! it, each by binary search.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{FesError, Result};
use crate::exec::Execution;
use crate::model::{trainable_parameter_count, LayerPlan, LayerShape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// Bytes per time unit.
    pub bandwidth: f64,
    pub bytes_per_param: usize,
    /// Time units per batch per layer.
    pub compute_fwd_per_layer: f64,
    pub compute_bwd_per_layer: f64,
    /// Energy per time unit.
    pub power_compute: f64,
    pub power_network: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            bandwidth: 10_000.0,
            bytes_per_param: 4,
            compute_fwd_per_layer: 0.01,
            compute_bwd_per_layer: 0.02,
            power_compute: 1.0,
            power_network: 0.5,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.bandwidth,
            self.compute_fwd_per_layer,
            self.compute_bwd_per_layer,
            self.power_compute,
            self.power_network,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !positive || self.bytes_per_param == 0 {
            return Err(FesError::InvalidConfig(
                "cost model constants must all be positive".into(),
            ));
        }
        Ok(())
    }

    /// Forward pass over one batch through `layers` layers.
    pub fn forward_time(&self, layers: usize) -> f64 {
        layers as f64 * self.compute_fwd_per_layer
    }

    /// One training batch under `plan`.
    pub fn train_batch_time(&self, plan: &LayerPlan) -> f64 {
        self.forward_time(plan.len())
            + (plan.len() - plan.frozen_prefix()) as f64 * self.compute_bwd_per_layer
    }

    pub fn comm_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth
    }

    pub fn energy(&self, compute_time: f64, comm_time: f64) -> f64 {
        self.power_compute * compute_time + self.power_network * comm_time
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCost {
    pub compute_time: f64,
    pub comm_time: f64,
    pub energy: f64,
    pub traffic_bytes: u64,
}

impl RoundCost {
    pub fn time(&self) -> f64 {
        self.compute_time + self.comm_time
    }
}

/// Cost of one client training `batches` batches under `plan`, including
/// the model download and update upload.
pub fn round_cost(
    shapes: &[LayerShape],
    plan: &LayerPlan,
    cost: &CostModel,
    batches: usize,
) -> RoundCost {
    assert_eq!(shapes.len(), plan.len(), "plan and model depth differ");
    let compute_time = batches as f64 * cost.train_batch_time(plan);
    let traffic_bytes = 2 * (cost.bytes_per_param * trainable_parameter_count(shapes, plan)) as u64;
    let comm_time = cost.comm_time(traffic_bytes);
    RoundCost {
        compute_time,
        comm_time,
        energy: cost.energy(compute_time, comm_time),
        traffic_bytes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanSearchConfig {
    pub epsilon_acc: f64,
    pub probe_rounds: usize,
    /// Batches per client round used to price plans.
    pub batches: usize,
    /// Absolute accuracy the all-Full plan is expected to reach.
    pub min_accuracy: Option<f64>,
}

impl Default for PlanSearchConfig {
    fn default() -> Self {
        Self {
            epsilon_acc: 0.01,
            probe_rounds: 30,
            batches: 8,
            min_accuracy: None,
        }
    }
}

impl PlanSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_acc >= 0.0) {
            return Err(FesError::InvalidConfig(
                "planner.epsilon_acc must be >= 0".into(),
            ));
        }
        if self.probe_rounds == 0 || self.batches == 0 {
            return Err(FesError::InvalidConfig(
                "planner.probe_rounds and batches must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Accuracy a plan reaches on the proxy task. Implementations must be
/// deterministic per plan.
pub trait PlanEvaluator: Sync {
    fn accuracy(&self, plan: &LayerPlan) -> f64;
}

impl<F: Fn(&LayerPlan) -> f64 + Sync> PlanEvaluator for F {
    fn accuracy(&self, plan: &LayerPlan) -> f64 {
        self(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanPoint {
    pub plan: LayerPlan,
    pub accuracy: f64,
    pub cost: RoundCost,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub plan: LayerPlan,
    pub cost: RoundCost,
    pub accuracy: f64,
    pub full_accuracy: f64,
    pub threshold: f64,
    /// Every plan evaluated during the search, in evaluation order.
    pub evaluated: Vec<PlanPoint>,
    pub linear_fallback: bool,
    pub warning: Option<String>,
}

struct Memo<'a> {
    eval: &'a dyn PlanEvaluator,
    seen: HashMap<LayerPlan, f64>,
    order: Vec<LayerPlan>,
}

impl Memo<'_> {
    fn get(&mut self, plan: LayerPlan) -> f64 {
        if let Some(a) = self.seen.get(&plan) {
            return *a;
        }
        let a = self.eval.accuracy(&plan);
        log::debug!("plan {plan}: accuracy {a:.4}");
        self.order.push(plan.clone());
        self.seen.insert(plan, a);
        a
    }
}

/// Largest `x` in `0..=max` with `ok(x)`, given `ok(0)`; assumes `ok` is
/// monotone (true then false).
fn last_true(max: usize, mut ok: impl FnMut(usize) -> bool) -> usize {
    let (mut lo, mut hi) = (0, max);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Checks the binary-search answer against its neighbour below and every
/// point already evaluated; falls back to a linear scan from the top on any
/// contradiction.
fn search_axis(
    max: usize,
    memo: &mut Memo<'_>,
    plan_at: impl Fn(usize) -> LayerPlan,
    threshold: f64,
) -> (usize, bool) {
    let ok = |x: usize, memo: &mut Memo<'_>| memo.get(plan_at(x)) >= threshold;
    let found = last_true(max, |x| ok(x, memo));
    let mut monotone = found == 0 || ok(found - 1, memo);
    if monotone {
        for x in 0..=max {
            if let Some(&a) = memo.seen.get(&plan_at(x)) {
                if (x <= found) != (a >= threshold) {
                    monotone = false;
                }
            }
        }
    }
    if monotone {
        return (found, false);
    }
    log::warn!("plan accuracy is not monotone along the search axis; scanning linearly");
    let best = (0..=max).rev().find(|&x| ok(x, memo)).unwrap_or(0);
    (best, true)
}

/// Binary-search co-planning: largest admissible frozen prefix, then the
/// largest admissible bias-only band above it.
pub fn co_plan(
    shapes: &[LayerShape],
    search: &PlanSearchConfig,
    cost: &CostModel,
    evaluator: &dyn PlanEvaluator,
) -> Result<PlanOutcome> {
    search.validate()?;
    cost.validate()?;
    let layers = shapes.len();
    if layers == 0 {
        return Err(FesError::InvalidConfig(
            "cannot plan a model with no layers".into(),
        ));
    }
    let mut memo = Memo {
        eval: evaluator,
        seen: HashMap::new(),
        order: Vec::new(),
    };
    let full = LayerPlan::all_full(layers);
    let full_accuracy = memo.get(full.clone());
    let threshold = full_accuracy - search.epsilon_acc;

    let (plan, fallback, warning) = match search.min_accuracy {
        Some(min) if full_accuracy < min => {
            let w = format!(
                "all-Full plan reaches {full_accuracy:.4} < required {min:.4}; keeping all-Full"
            );
            log::warn!("{w}");
            (full, false, Some(w))
        }
        _ => {
            let (frozen, fb1) = search_axis(
                layers,
                &mut memo,
                |f| LayerPlan::terraced(layers, f, 0),
                threshold,
            );
            let (band, fb2) = search_axis(
                layers - frozen,
                &mut memo,
                |b| LayerPlan::terraced(layers, frozen, b),
                threshold,
            );
            (LayerPlan::terraced(layers, frozen, band), fb1 || fb2, None)
        }
    };
    let accuracy = memo.get(plan.clone());
    let evaluated = memo
        .order
        .iter()
        .map(|p| {
            let a = memo.seen[p];
            PlanPoint {
                plan: p.clone(),
                accuracy: a,
                cost: round_cost(shapes, p, cost, search.batches),
                admissible: a >= threshold,
            }
        })
        .collect();
    Ok(PlanOutcome {
        cost: round_cost(shapes, &plan, cost, search.batches),
        plan,
        accuracy,
        full_accuracy,
        threshold,
        evaluated,
        linear_fallback: fallback,
        warning,
    })
}

/// Every terraced plan for `layers` layers: (L+1)(L+2)/2 of them.
pub fn terraced_plans(layers: usize) -> Vec<LayerPlan> {
    let mut out = Vec::new();
    for frozen in 0..=layers {
        for band in 0..=layers - frozen {
            out.push(LayerPlan::terraced(layers, frozen, band));
        }
    }
    out
}

/// Evaluate many plans, concurrently when `exec` allows; output follows
/// input order.
pub fn evaluate_plans(
    shapes: &[LayerShape],
    plans: &[LayerPlan],
    cost: &CostModel,
    batches: usize,
    evaluator: &dyn PlanEvaluator,
    exec: Execution,
) -> Vec<(LayerPlan, f64, RoundCost)> {
    exec.map(plans, |p| {
        (
            p.clone(),
            evaluator.accuracy(p),
            round_cost(shapes, p, cost, batches),
        )
    })
}
