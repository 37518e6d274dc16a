//! Two-stream timeline simulation of offloaded expert execution.
//!
//! Overlapped mode runs a load stream and a compute stream side by side:
//!
//! * loads run in schedule order, one at a time, each taking `beta`;
//! * the compute of an expert starts once its load has landed and the
//!   previous compute has finished, and lasts its `alpha`;
//! * an expert is *resident* from the moment its parameters land until its
//!   compute starts, and at most `K` experts may be resident. The load of the
//!   `j`-th expert is therefore issued no earlier than `beta` before the
//!   compute of the `(j - K)`-th expert begins, so that it lands exactly when
//!   a slot frees up.
//!
//! With this residency rule an order satisfying the scheduler's prefix bands
//! never stalls the compute stream after the first load: makespan is
//! `beta + sum(alpha)`. The expert being computed is not counted, so device
//! memory holds up to `K + 1` experts.
//!
//! Serial mode loads and then computes each expert with no overlap.
//!
//! Times come from an explicit recurrence over the order, not an event queue.

mod export;

pub use export::{chrome_trace, read_events_csv, write_events_csv};

use serde::{Deserialize, Serialize};

use crate::cost_model::{CostVector, Derivation};
use crate::error::{Error, Result};
use crate::gating::ExpertWorkload;
use crate::model_config::{HardwareProfile, ModelGeometry};
use crate::scheduler::{self, Method, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Load,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub stream: Stream,
    #[serde(rename = "layer")]
    pub layer_id: usize,
    #[serde(rename = "expert")]
    pub expert_id: usize,
    #[serde(rename = "start_s")]
    pub start: f64,
    #[serde(rename = "end_s")]
    pub end: f64,
}

impl TimelineEvent {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Overlapped,
    /// Load, then compute, one expert at a time.
    Serial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: usize,
    pub n_experts: usize,
    pub start: f64,
    pub end: f64,
    pub compute_busy: f64,
    pub load_busy: f64,
    pub compute_stall: f64,
    pub peak_resident_experts: usize,
    pub lower_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: f64,
    pub compute_busy: f64,
    pub load_busy: f64,
    /// Idle compute time between the first compute start and the last
    /// compute end.
    pub compute_stall: f64,
    /// Largest number of landed-but-not-started experts of one layer.
    pub peak_resident_experts: usize,
    /// `compute_busy / makespan`.
    pub overlap_efficiency: f64,
    pub per_layer_breakdown: Vec<LayerReport>,
}

impl SimReport {
    /// Derives every field from the event list. `layer_costs[l]` supplies the
    /// lower bound of layer `l`.
    pub fn from_events(events: &[TimelineEvent], layer_costs: &[CostVector]) -> SimReport {
        let span = span(events.iter());
        let (compute_busy, load_busy) = busy(events.iter());
        let compute_stall = stall(events.iter());

        let per_layer_breakdown: Vec<LayerReport> = layer_costs
            .iter()
            .enumerate()
            .map(|(layer_id, costs)| {
                let layer = || events.iter().filter(move |e| e.layer_id == layer_id);
                let (start, end) = bounds(layer());
                let (compute_busy, load_busy) = busy(layer());
                LayerReport {
                    layer_id,
                    n_experts: layer().filter(|e| e.stream == Stream::Compute).count(),
                    start,
                    end,
                    compute_busy,
                    load_busy,
                    compute_stall: stall(layer()),
                    peak_resident_experts: peak_resident(layer()),
                    lower_bound: lower_bound(costs),
                }
            })
            .collect();

        SimReport {
            makespan: span,
            compute_busy,
            load_busy,
            compute_stall,
            peak_resident_experts: per_layer_breakdown
                .iter()
                .map(|l| l.peak_resident_experts)
                .max()
                .unwrap_or(0),
            overlap_efficiency: if span > 0.0 { compute_busy / span } else { 1.0 },
            per_layer_breakdown,
        }
    }
}

fn bounds<'a>(events: impl Iterator<Item = &'a TimelineEvent>) -> (f64, f64) {
    events.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
        (lo.min(e.start), hi.max(e.end))
    })
}

/// Wall-clock time from the earliest start to the latest end.
pub fn span<'a>(events: impl Iterator<Item = &'a TimelineEvent>) -> f64 {
    let (lo, hi) = bounds(events);
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

fn busy<'a>(events: impl Iterator<Item = &'a TimelineEvent>) -> (f64, f64) {
    events.fold((0.0, 0.0), |(compute, load), e| match e.stream {
        Stream::Compute => (compute + e.duration(), load),
        Stream::Load => (compute, load + e.duration()),
    })
}

fn stall<'a>(events: impl Iterator<Item = &'a TimelineEvent>) -> f64 {
    let mut computes: Vec<&TimelineEvent> =
        events.filter(|e| e.stream == Stream::Compute).collect();
    computes.sort_by(|a, b| a.start.total_cmp(&b.start));
    computes
        .windows(2)
        .map(|w| (w[1].start - w[0].end).max(0.0))
        .sum()
}

/// Peak count of overlapping `[load_end, compute_start)` intervals.
fn peak_resident<'a>(events: impl Iterator<Item = &'a TimelineEvent>) -> usize {
    use std::collections::HashMap;
    let mut landed: HashMap<(usize, usize), f64> = HashMap::new();
    let mut started: HashMap<(usize, usize), f64> = HashMap::new();
    for e in events {
        let key = (e.layer_id, e.expert_id);
        match e.stream {
            Stream::Load => landed.insert(key, e.end),
            Stream::Compute => started.insert(key, e.start),
        };
    }
    let intervals = landed
        .iter()
        .filter_map(|(key, &from)| started.get(key).map(|&to| (from, to)));
    peak_overlap(intervals)
}

/// Maximum number of simultaneously open half-open intervals `[from, to)`.
pub(crate) fn peak_overlap(intervals: impl Iterator<Item = (f64, f64)>) -> usize {
    // Closings sort before openings at equal times.
    let mut points: Vec<(f64, i8)> = Vec::new();
    for (from, to) in intervals {
        if to > from {
            points.push((from, 1));
            points.push((to, -1));
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut open = 0i64;
    let mut peak = 0i64;
    for (_, delta) in points {
        open += delta as i64;
        peak = peak.max(open);
    }
    peak as usize
}

/// `max(beta + sum(alpha), T * beta)`: with one load stream no schedule can
/// beat the compute chain after the first load, nor the back-to-back loads.
pub fn lower_bound(costs: &CostVector) -> f64 {
    if costs.is_empty() {
        return 0.0;
    }
    let compute_bound = costs.beta + costs.total_alpha();
    let load_bound = costs.len() as f64 * costs.beta;
    compute_bound.max(load_bound)
}

/// Stream cursors carried from one layer to the next.
#[derive(Debug, Clone, Copy)]
struct Cursor {
    load_free: f64,
    compute_free: f64,
}

fn run_layer(
    layer_id: usize,
    order: &[usize],
    costs: &CostVector,
    k: usize,
    mode: Mode,
    cursor: Cursor,
    events: &mut Vec<TimelineEvent>,
) -> Cursor {
    let beta = costs.beta;
    let Cursor {
        mut load_free,
        mut compute_free,
    } = cursor;
    let mut compute_starts = Vec::with_capacity(order.len());

    for (j, &expert) in order.iter().enumerate() {
        // Gated loads are placed by their landing time so the hand-over of a
        // slot is exact in floating point.
        let (load_start, load_end) = match mode {
            Mode::Overlapped if j >= k && compute_starts[j - k] > load_free + beta => {
                (compute_starts[j - k] - beta, compute_starts[j - k])
            }
            Mode::Overlapped => (load_free, load_free + beta),
            Mode::Serial => {
                let start = load_free.max(compute_free);
                (start, start + beta)
            }
        };
        let compute_start = load_end.max(compute_free);
        let compute_end = compute_start + costs.alphas[expert];

        events.push(TimelineEvent {
            stream: Stream::Load,
            layer_id,
            expert_id: expert,
            start: load_start,
            end: load_end,
        });
        events.push(TimelineEvent {
            stream: Stream::Compute,
            layer_id,
            expert_id: expert,
            start: compute_start,
            end: compute_end,
        });

        compute_starts.push(compute_start);
        load_free = load_end;
        compute_free = compute_end;
    }
    Cursor {
        load_free,
        compute_free,
    }
}

fn check_order(order: &[usize], t: usize) -> Result<()> {
    let mut seen = vec![false; t];
    if order.len() != t
        || order
            .iter()
            .any(|&e| e >= t || std::mem::replace(&mut seen[e], true))
    {
        return Err(Error::input(format!(
            "order {order:?} is not a permutation of 0..{t}"
        )));
    }
    Ok(())
}

/// Simulates one layer under `order`.
pub fn simulate(
    order: &[usize],
    costs: &CostVector,
    k: usize,
    mode: Mode,
) -> Result<(Vec<TimelineEvent>, SimReport)> {
    if k == 0 {
        return Err(Error::input("K must be >= 1"));
    }
    check_order(order, costs.len())?;
    let mut events = Vec::with_capacity(2 * order.len());
    run_layer(
        0,
        order,
        costs,
        k,
        mode,
        Cursor {
            load_free: 0.0,
            compute_free: 0.0,
        },
        &mut events,
    );
    let report = SimReport::from_events(&events, std::slice::from_ref(costs));
    Ok((events, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Greedy per layer, with the exact fallback for small layers.
    PerLayerGreedy,
    /// Exact search per layer; fails for layers above the exact size limit.
    Exact,
    /// Experts in index order.
    NaiveOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub policy: OrderPolicy,
    pub mode: Mode,
    /// Let the load stream run into the next layer instead of draining.
    pub continuous_load_stream: bool,
    /// Do not load experts that received no tokens.
    pub skip_empty_experts: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            policy: OrderPolicy::PerLayerGreedy,
            mode: Mode::Overlapped,
            continuous_load_stream: false,
            skip_empty_experts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub schedules: Vec<Schedule>,
    pub events: Vec<TimelineEvent>,
    pub report: SimReport,
}

fn schedule_layer(costs: &CostVector, k: usize, policy: OrderPolicy) -> Result<Schedule> {
    match policy {
        OrderPolicy::PerLayerGreedy => scheduler::plan(costs, k),
        OrderPolicy::Exact => scheduler::exact_order(costs, k, scheduler::EXACT_MAX_T),
        OrderPolicy::NaiveOrder => scheduler::naive_order(costs, k),
    }
}

/// Simulates consecutive MoE layers on shared load and compute streams.
///
/// Layer `l + 1` computes only after layer `l` has finished computing. With
/// `continuous_load_stream` the load stream moves on to layer `l + 1` as soon
/// as it is done with layer `l`, subject to layer `l + 1`'s own budget of `K`
/// resident experts; otherwise both streams wait for layer `l` to finish.
pub fn simulate_layers(
    layers: &[CostVector],
    k: usize,
    options: &ModelOptions,
) -> Result<ModelRun> {
    if k == 0 {
        return Err(Error::input("K must be >= 1"));
    }
    let mut events = Vec::new();
    let mut schedules = Vec::with_capacity(layers.len());
    // What each layer actually loads, for the lower bounds.
    let mut loaded = Vec::with_capacity(layers.len());
    let mut cursor = Cursor {
        load_free: 0.0,
        compute_free: 0.0,
    };

    for (layer_id, costs) in layers.iter().enumerate() {
        costs.validate()?;
        let reduced = if options.skip_empty_experts {
            costs.without_empty()
        } else {
            Some((costs.clone(), (0..costs.len()).collect()))
        };
        let Some((active, ids)) = reduced else {
            loaded.push(CostVector {
                alphas: Vec::new(),
                ..costs.clone()
            });
            schedules.push(Schedule {
                order: Vec::new(),
                feasible: true,
                slack: Vec::new(),
                first_violation: None,
                diagnosis: None,
                method: Method::Naive,
                greedy_counterexample: false,
            });
            continue;
        };

        let mut schedule = schedule_layer(&active, k, options.policy)?;
        let order = schedule.order.clone();
        if !options.continuous_load_stream {
            let t = cursor.load_free.max(cursor.compute_free);
            cursor = Cursor {
                load_free: t,
                compute_free: t,
            };
        }
        let first_event = events.len();
        cursor = run_layer(
            layer_id,
            &order,
            &active,
            k,
            options.mode,
            cursor,
            &mut events,
        );
        // Report original expert ids.
        for e in &mut events[first_event..] {
            e.expert_id = ids[e.expert_id];
        }
        schedule.order = order.iter().map(|&i| ids[i]).collect();
        schedules.push(schedule);
        loaded.push(active);
    }

    let report = SimReport::from_events(&events, &loaded);
    Ok(ModelRun {
        schedules,
        events,
        report,
    })
}

/// [`simulate_layers`] starting from per-layer token counts.
pub fn simulate_model(
    workloads: &[ExpertWorkload],
    geometry: &ModelGeometry,
    hw: &HardwareProfile,
    k: usize,
    options: &ModelOptions,
) -> Result<ModelRun> {
    let layers = workloads
        .iter()
        .map(|w| crate::cost_model::compute_costs(w, geometry, hw))
        .collect::<Result<Vec<_>>>()?;
    simulate_layers(&layers, k, options)
}

/// Costs with every layer identical; handy for tests and direct cost studies.
pub fn repeat_layers(costs: &CostVector, n: usize) -> Vec<CostVector> {
    (0..n)
        .map(|l| CostVector {
            derivation: Derivation {
                workload: Some(format!("layer={l}")),
                ..costs.derivation.clone()
            },
            ..costs.clone()
        })
        .collect()
}
