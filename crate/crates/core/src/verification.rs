//! Independent checks for the scheduler and simulator.
//!
//! [`enumerate_feasibility`] decides feasibility by trying every permutation
//! against [`check_constraints`]; it is `O(T! * T)` and refuses `T > 9`.
//! [`replay_check`] re-derives the timeline invariants from a raw event list,
//! so it also works on traces read back from disk.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost_model::CostVector;
use crate::error::{Error, Result};
use crate::scheduler::{check_constraints, greedy_order, ABS_TOL, REL_TOL};
use crate::simulator::{self, SimReport, Stream, TimelineEvent};

pub const ENUMERATION_MAX_T: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleResult {
    /// SHA-256 (hex, truncated to 16 bytes) of `(alphas, beta, K)`.
    pub instance_digest: String,
    pub oracle_feasible: bool,
    /// Lexicographically smallest feasible order.
    pub witness_order: Option<Vec<usize>>,
    pub greedy_feasible: bool,
    pub mismatch: bool,
}

pub fn instance_digest(costs: &CostVector, k: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update((k as u64).to_le_bytes());
    hasher.update(costs.beta.to_bits().to_le_bytes());
    hasher.update((costs.len() as u64).to_le_bytes());
    for a in &costs.alphas {
        hasher.update(a.to_bits().to_le_bytes());
    }
    hasher.finalize()[..16]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Rearranges `perm` into the next permutation in lexicographic order.
/// Returns `false` (leaving `perm` sorted) after the last one.
fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = perm.windows(2).rposition(|w| w[0] < w[1]) else {
        perm.reverse();
        return false;
    };
    let j = perm.iter().rposition(|&x| x > perm[i]).unwrap();
    perm.swap(i, j);
    perm[i + 1..].reverse();
    true
}

/// Ground-truth feasibility by brute force. The greedy verdict is recorded
/// next to it for comparison but never consulted.
pub fn enumerate_feasibility(costs: &CostVector, k: usize) -> Result<OracleResult> {
    let t = costs.len();
    if t > ENUMERATION_MAX_T {
        return Err(Error::Size {
            what: "enumerate_feasibility",
            max: ENUMERATION_MAX_T,
            got: t,
        });
    }
    let mut perm: Vec<usize> = (0..t).collect();
    let mut witness_order = None;
    loop {
        if check_constraints(&perm, costs, k)?.feasible {
            witness_order = Some(perm.clone());
            break;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let oracle_feasible = witness_order.is_some();
    let greedy_feasible = greedy_order(costs, k)?.feasible;
    Ok(OracleResult {
        instance_digest: instance_digest(costs, k),
        oracle_feasible,
        witness_order,
        greedy_feasible,
        mismatch: oracle_feasible != greedy_feasible,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Two events on one stream overlap or appear out of time order.
    StreamOverlap {
        stream: Stream,
        layer: usize,
        expert: usize,
        start: f64,
        previous_end: f64,
    },
    /// Compute started before the expert's load ended.
    Causality {
        layer: usize,
        expert: usize,
        load_end: f64,
        compute_start: f64,
    },
    /// More than K experts of one layer were landed and waiting at once.
    Residency {
        layer: usize,
        resident: usize,
        k: usize,
    },
    Duration {
        stream: Stream,
        layer: usize,
        expert: usize,
        expected: f64,
        actual: f64,
    },
    NegativeDuration {
        stream: Stream,
        layer: usize,
        expert: usize,
    },
    UnknownExpert {
        layer: usize,
        expert: usize,
    },
    DuplicateEvent {
        stream: Stream,
        layer: usize,
        expert: usize,
    },
    /// An expert with work has no event on this stream.
    MissingEvent {
        stream: Stream,
        layer: usize,
        expert: usize,
    },
    /// A reported quantity disagrees with the value recomputed from events.
    Report {
        field: String,
        reported: f64,
        replayed: f64,
    },
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= REL_TOL * scale.abs().max(a.abs()).max(b.abs()) + ABS_TOL
}

/// Re-verifies a timeline against `costs[layer]` and `K`: stream
/// exclusivity, load-before-compute, at most `K` landed-but-waiting experts
/// per layer, and event durations equal to `beta` / `alpha`. Experts with a
/// zero alpha may be absent (they are dropped by `skip_empty_experts`).
/// An empty result means the trace is clean.
pub fn replay_check(events: &[TimelineEvent], costs: &[CostVector], k: usize) -> Vec<Violation> {
    let mut violations = Vec::new();

    let mut last_end: HashMap<Stream, f64> = HashMap::new();
    for e in events {
        if e.end < e.start {
            violations.push(Violation::NegativeDuration {
                stream: e.stream,
                layer: e.layer_id,
                expert: e.expert_id,
            });
        }
        if let Some(&prev) = last_end.get(&e.stream) {
            if e.start < prev && !close(e.start, prev, prev) {
                violations.push(Violation::StreamOverlap {
                    stream: e.stream,
                    layer: e.layer_id,
                    expert: e.expert_id,
                    start: e.start,
                    previous_end: prev,
                });
            }
        }
        let slot = last_end.entry(e.stream).or_insert(e.end);
        *slot = slot.max(e.end);
    }

    // (layer, expert) -> (load, compute)
    type Pair<'a> = (Option<&'a TimelineEvent>, Option<&'a TimelineEvent>);
    let mut pairs: BTreeMap<(usize, usize), Pair> = BTreeMap::new();
    for e in events {
        let Some(alpha) = costs
            .get(e.layer_id)
            .and_then(|c| c.alphas.get(e.expert_id))
        else {
            violations.push(Violation::UnknownExpert {
                layer: e.layer_id,
                expert: e.expert_id,
            });
            continue;
        };
        let beta = costs[e.layer_id].beta;
        let expected = match e.stream {
            Stream::Load => beta,
            Stream::Compute => *alpha,
        };
        if !close(e.duration(), expected, e.end) {
            violations.push(Violation::Duration {
                stream: e.stream,
                layer: e.layer_id,
                expert: e.expert_id,
                expected,
                actual: e.duration(),
            });
        }
        let entry = pairs.entry((e.layer_id, e.expert_id)).or_default();
        let slot = match e.stream {
            Stream::Load => &mut entry.0,
            Stream::Compute => &mut entry.1,
        };
        if slot.replace(e).is_some() {
            violations.push(Violation::DuplicateEvent {
                stream: e.stream,
                layer: e.layer_id,
                expert: e.expert_id,
            });
        }
    }

    for (layer, layer_costs) in costs.iter().enumerate() {
        for (expert, &alpha) in layer_costs.alphas.iter().enumerate() {
            let (load, compute) = pairs.get(&(layer, expert)).copied().unwrap_or((None, None));
            if load.is_none() && compute.is_none() && alpha == 0.0 {
                continue;
            }
            for (stream, present) in [
                (Stream::Load, load.is_some()),
                (Stream::Compute, compute.is_some()),
            ] {
                if !present {
                    violations.push(Violation::MissingEvent {
                        stream,
                        layer,
                        expert,
                    });
                }
            }
        }
    }

    let mut waiting: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (&(layer, expert), &(load, compute)) in &pairs {
        let (Some(load), Some(compute)) = (load, compute) else {
            continue;
        };
        if compute.start < load.end && !close(compute.start, load.end, load.end) {
            violations.push(Violation::Causality {
                layer,
                expert,
                load_end: load.end,
                compute_start: compute.start,
            });
        }
        // Shift the landing by the tolerance so that a slot handed over at
        // the same instant (up to rounding) is not double counted.
        let landed = load.end + REL_TOL * load.end.abs() + ABS_TOL;
        waiting
            .entry(layer)
            .or_default()
            .push((landed, compute.start));
    }
    for (layer, intervals) in waiting {
        let resident = simulator::peak_overlap(intervals.into_iter());
        if resident > k {
            violations.push(Violation::Residency { layer, resident, k });
        }
    }

    violations
}

/// Compares a [`SimReport`] with what the events imply. Makespan must match
/// exactly; sums are compared with the checker tolerance.
pub fn check_report(events: &[TimelineEvent], report: &SimReport) -> Vec<Violation> {
    let mut violations = Vec::new();
    let replayed = simulator::span(events.iter());
    if replayed != report.makespan {
        violations.push(Violation::Report {
            field: "makespan".into(),
            reported: report.makespan,
            replayed,
        });
    }
    let sum = |stream: Stream| -> f64 {
        events
            .iter()
            .filter(|e| e.stream == stream)
            .map(TimelineEvent::duration)
            .sum()
    };
    for (field, reported, replayed) in [
        ("compute_busy", report.compute_busy, sum(Stream::Compute)),
        ("load_busy", report.load_busy, sum(Stream::Load)),
    ] {
        if !close(reported, replayed, replayed) {
            violations.push(Violation::Report {
                field: field.into(),
                reported,
                replayed,
            });
        }
    }
    if report.makespan + ABS_TOL < report.compute_busy.max(report.load_busy) * (1.0 - REL_TOL) {
        violations.push(Violation::Report {
            field: "makespan_vs_busy".into(),
            reported: report.makespan,
            replayed: report.compute_busy.max(report.load_busy),
        });
    }
    if !(0.0..=1.0 + REL_TOL).contains(&report.overlap_efficiency) {
        violations.push(Violation::Report {
            field: "overlap_efficiency".into(),
            reported: report.overlap_efficiency,
            replayed: report.compute_busy / report.makespan,
        });
    }
    violations
}

/// `max(count) / mean(count)`; 1.0 is perfectly balanced.
pub fn load_imbalance(token_counts: &[u64]) -> f64 {
    let total: u64 = token_counts.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / token_counts.len() as f64;
    *token_counts.iter().max().unwrap() as f64 / mean
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, Mode};

    fn costs(alphas: &[f64], beta: f64) -> CostVector {
        CostVector::new(alphas.to_vec(), beta).unwrap()
    }

    #[test]
    fn permutations_in_lexicographic_order() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(
            seen,
            vec![
                vec![0, 1, 2],
                vec![0, 2, 1],
                vec![1, 0, 2],
                vec![1, 2, 0],
                vec![2, 0, 1],
                vec![2, 1, 0]
            ]
        );
        assert_eq!(p, vec![0, 1, 2]);
    }

    #[test]
    fn oracle_small_cases() {
        let one = enumerate_feasibility(&costs(&[7.0], 1.0), 1).unwrap();
        assert!(one.oracle_feasible);
        assert_eq!(one.witness_order, Some(vec![0]));

        let zero = enumerate_feasibility(&costs(&[0.0; 3], 1.0), 2).unwrap();
        assert!(!zero.oracle_feasible);
        assert_eq!(zero.witness_order, None);
        assert!(!zero.mismatch);

        let instance = enumerate_feasibility(&costs(&[0.5, 2.0, 1.0, 0.5], 1.0), 2).unwrap();
        assert!(instance.oracle_feasible);
        assert_eq!(instance.witness_order, Some(vec![1, 0, 2, 3]));
        assert!(instance.greedy_feasible);
        assert_eq!(instance.instance_digest.len(), 32);
    }

    #[test]
    fn oracle_size_guard() {
        assert!(matches!(
            enumerate_feasibility(&costs(&[1.0; 10], 1.0), 1),
            Err(Error::Size { .. })
        ));
    }

    #[test]
    fn digest_depends_on_every_input() {
        let c = costs(&[1.0, 2.0], 1.0);
        let d = instance_digest(&c, 1);
        assert_eq!(d, instance_digest(&c, 1));
        assert_ne!(d, instance_digest(&c, 2));
        assert_ne!(d, instance_digest(&costs(&[2.0, 1.0], 1.0), 1));
        assert_ne!(d, instance_digest(&costs(&[1.0, 2.0], 0.5), 1));
    }

    #[test]
    fn clean_trace() {
        let c = costs(&[0.5, 2.0, 1.0, 0.5], 1.0);
        let (events, report) = simulate(&[0, 1, 2, 3], &c, 2, Mode::Overlapped).unwrap();
        assert!(replay_check(&events, std::slice::from_ref(&c), 2).is_empty());
        assert!(check_report(&events, &report).is_empty());
    }

    #[test]
    fn injected_causality_fault() {
        let c = costs(&[0.5, 2.0, 1.0, 0.5], 1.0);
        let (mut events, _) = simulate(&[1, 2, 0, 3], &c, 2, Mode::Overlapped).unwrap();
        // Compute of the first expert moved before its load ends.
        events[1].start = 0.5;
        events[1].end = 2.5;
        let v = replay_check(&events, std::slice::from_ref(&c), 2);
        assert!(
            v.iter()
                .any(|v| matches!(v, Violation::Causality { expert: 1, .. })),
            "{v:?}"
        );
    }

    #[test]
    fn injected_residency_fault() {
        // Three experts landed by t=3 while none has started computing: K + 1 = 3 > 2.
        let c = costs(&[1.0, 1.0, 1.0], 1.0);
        let mut events = Vec::new();
        for e in 0..3 {
            events.push(TimelineEvent {
                stream: Stream::Load,
                layer_id: 0,
                expert_id: e,
                start: e as f64,
                end: e as f64 + 1.0,
            });
        }
        for e in 0..3 {
            events.push(TimelineEvent {
                stream: Stream::Compute,
                layer_id: 0,
                expert_id: e,
                start: 4.0 + e as f64,
                end: 5.0 + e as f64,
            });
        }
        let v = replay_check(&events, std::slice::from_ref(&c), 2);
        assert_eq!(
            v,
            vec![Violation::Residency {
                layer: 0,
                resident: 3,
                k: 2
            }]
        );
        assert!(replay_check(&events, std::slice::from_ref(&c), 3).is_empty());
    }

    #[test]
    fn injected_overlap_duration_and_missing() {
        let c = costs(&[1.0, 1.0], 1.0);
        let (mut events, mut report) = simulate(&[0, 1], &c, 2, Mode::Overlapped).unwrap();
        events[2].start -= 0.5; // second load overlaps the first
        let v = replay_check(&events, std::slice::from_ref(&c), 2);
        assert!(v.iter().any(|v| matches!(
            v,
            Violation::StreamOverlap {
                stream: Stream::Load,
                ..
            }
        )));
        assert!(v.iter().any(|v| matches!(
            v,
            Violation::Duration {
                stream: Stream::Load,
                ..
            }
        )));

        events.truncate(3);
        let v = replay_check(&events, std::slice::from_ref(&c), 2);
        assert!(v.contains(&Violation::MissingEvent {
            stream: Stream::Compute,
            layer: 0,
            expert: 1
        }));

        report.makespan += 1.0;
        let (events, _) = simulate(&[0, 1], &c, 2, Mode::Overlapped).unwrap();
        assert!(matches!(
            &check_report(&events, &report)[..],
            [Violation::Report { .. }]
        ));
    }

    #[test]
    fn imbalance_ratio() {
        assert_eq!(load_imbalance(&[5, 5, 5, 5]), 1.0);
        assert_eq!(load_imbalance(&[8, 0, 0, 0]), 4.0);
        assert_eq!(load_imbalance(&[0, 0]), 1.0);
    }
}
