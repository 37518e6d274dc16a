//! Expert ordering under the prefix-band constraints.
//!
//! For an order with prefix sums `P_m` (sum of the first `m` scheduled
//! alphas), the order is feasible when for every `m` in `0..T`
//!
//! ```text
//! m * beta <= P_m <= (m + K) * beta
//! ```
//!
//! The lower bound means the load of the expert at position `m` is finished
//! by the time the `m` experts before it have computed. The upper bound means
//! loads running back to back never stack more than `K` landed experts that
//! are still waiting for the compute stream.
//!
//! Comparisons use a relative tolerance of `1e-9` with an absolute floor of
//! `1e-15` seconds.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::cost_model::CostVector;
use crate::error::{Error, Result};

pub const REL_TOL: f64 = 1e-9;
pub const ABS_TOL: f64 = 1e-15;

/// Default size limit for [`exact_order`] and for the fallback in [`plan`].
pub const EXACT_MAX_T: usize = 12;

/// Slack allowed when comparing against `bound`.
pub fn tolerance(bound: f64) -> f64 {
    (REL_TOL * bound.abs()).max(ABS_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Prefix compute too short to hide the next load.
    Lower,
    /// Prefix compute so long that more than K loaded experts would wait.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandViolation {
    /// Prefix length `m` (equivalently the 0-based position whose load is checked).
    pub position: usize,
    pub bound: Bound,
    pub prefix: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintCheck {
    pub feasible: bool,
    /// `P_m - m * beta` for every `m` in `0..T`.
    pub slack: Vec<f64>,
    pub first_violation: Option<BandViolation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    /// Greedy failed and the exact search found an order.
    ExactFallback,
    Exact,
    /// Experts in index order.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infeasibility {
    /// Even the largest `T - 1` alphas cannot cover `T - 1` loads.
    TooLittleCompute,
    /// Enough compute in total, but no order fits the bands.
    Imbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    Feasible,
    TooLittleCompute,
    Imbalanced,
}

impl From<Infeasibility> for Diagnosis {
    fn from(value: Infeasibility) -> Self {
        match value {
            Infeasibility::TooLittleCompute => Diagnosis::TooLittleCompute,
            Infeasibility::Imbalanced => Diagnosis::Imbalanced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub order: Vec<usize>,
    pub feasible: bool,
    pub slack: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_violation: Option<BandViolation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<Infeasibility>,
    pub method: Method,
    /// Greedy reported infeasible although a feasible order exists.
    #[serde(default)]
    pub greedy_counterexample: bool,
}

impl Schedule {
    fn from_check(order: Vec<usize>, check: ConstraintCheck, method: Method) -> Self {
        Schedule {
            order,
            feasible: check.feasible,
            slack: check.slack,
            first_violation: check.first_violation,
            diagnosis: None,
            method,
            greedy_counterexample: false,
        }
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::input("K must be >= 1"));
    }
    Ok(())
}

/// Which bound, if any, prefix `prefix` of length `m` breaks.
fn band_check(prefix: f64, m: usize, beta: f64, k: usize) -> Option<(Bound, f64)> {
    let lower = m as f64 * beta;
    if prefix < lower - tolerance(lower) {
        return Some((Bound::Lower, lower));
    }
    let upper = (m + k) as f64 * beta;
    if prefix > upper + tolerance(upper) {
        return Some((Bound::Upper, upper));
    }
    None
}

pub fn check_constraints(order: &[usize], costs: &CostVector, k: usize) -> Result<ConstraintCheck> {
    check_k(k)?;
    let t = costs.len();
    if order.len() != t {
        return Err(Error::input(format!(
            "order has {} entries, expected {t}",
            order.len()
        )));
    }
    let mut seen = vec![false; t];
    for &e in order {
        if e >= t || std::mem::replace(&mut seen[e], true) {
            return Err(Error::input(format!(
                "order {order:?} is not a permutation of 0..{t}"
            )));
        }
    }

    let mut slack = Vec::with_capacity(t);
    let mut first_violation = None;
    let mut prefix = 0.0;
    for (m, &expert) in order.iter().enumerate() {
        slack.push(prefix - m as f64 * costs.beta);
        if first_violation.is_none() {
            if let Some((bound, limit)) = band_check(prefix, m, costs.beta, k) {
                first_violation = Some(BandViolation {
                    position: m,
                    bound,
                    prefix,
                    limit,
                });
            }
        }
        prefix += costs.alphas[expert];
    }
    Ok(ConstraintCheck {
        feasible: first_violation.is_none(),
        slack,
        first_violation,
    })
}

/// Experts in index order, checked but not rearranged.
pub fn naive_order(costs: &CostVector, k: usize) -> Result<Schedule> {
    let order: Vec<usize> = (0..costs.len()).collect();
    let check = check_constraints(&order, costs, k)?;
    let mut schedule = Schedule::from_check(order, check, Method::Naive);
    if !schedule.feasible {
        schedule.diagnosis = Some(classify(costs));
    }
    Ok(schedule)
}

/// Builds an order position by position. At each position it takes the
/// smallest remaining alpha that lifts the prefix to the lower bound without
/// passing the upper one. If nothing reaches the lower bound it takes the
/// largest alpha; if everything that reaches it overshoots it takes the
/// smallest overshoot. Equal alphas go to the lower expert id first.
///
/// Keeping large alphas for later suits the lower bound, which grows by
/// `beta` per position. The rule is not complete: see [`plan`].
pub fn greedy_order(costs: &CostVector, k: usize) -> Result<Schedule> {
    check_k(k)?;
    let t = costs.len();
    let beta = costs.beta;

    // Ascending by (alpha, id).
    let mut remaining: Vec<usize> = (0..t).collect();
    remaining.sort_by(|&a, &b| costs.alphas[a].total_cmp(&costs.alphas[b]).then(a.cmp(&b)));

    let mut order = Vec::with_capacity(t);
    let mut prefix = 0.0;
    while !remaining.is_empty() {
        let m = order.len() + 1;
        let pick = if remaining.len() == 1 {
            0
        } else {
            let lower = m as f64 * beta;
            let reaches = remaining
                .iter()
                .position(|&e| prefix + costs.alphas[e] >= lower - tolerance(lower));
            match reaches {
                Some(idx) => idx,
                None => {
                    // Largest alpha, lowest id among equals.
                    let largest = costs.alphas[*remaining.last().unwrap()];
                    remaining
                        .iter()
                        .position(|&e| costs.alphas[e] == largest)
                        .unwrap()
                }
            }
        };
        let expert = remaining.remove(pick);
        prefix += costs.alphas[expert];
        order.push(expert);
    }

    let check = check_constraints(&order, costs, k)?;
    let mut schedule = Schedule::from_check(order, check, Method::Greedy);
    if !schedule.feasible {
        schedule.diagnosis = Some(classify(costs));
    }
    Ok(schedule)
}

/// Branch-and-bound over permutations, pruning any prefix that leaves its
/// band. Returns the lexicographically smallest feasible order when one
/// exists; otherwise an infeasible schedule over the identity order.
///
/// Dead subsets are memoised (whether a set of scheduled experts can be
/// completed depends only on the set), so the search is `O(2^T * T)` in the
/// worst case.
pub fn exact_order(costs: &CostVector, k: usize, max_t: usize) -> Result<Schedule> {
    check_k(k)?;
    let t = costs.len();
    if t > max_t || t > 63 {
        return Err(Error::Size {
            what: "exact_order",
            max: max_t.min(63),
            got: t,
        });
    }

    struct Search<'a> {
        alphas: &'a [f64],
        beta: f64,
        k: usize,
        dead: HashSet<u64>,
        path: Vec<usize>,
    }

    impl Search<'_> {
        fn extend(&mut self, used: u64, prefix: f64) -> bool {
            let t = self.alphas.len();
            let m = self.path.len();
            if m == t {
                return true;
            }
            if self.dead.contains(&used) {
                return false;
            }
            let mut tried: Vec<f64> = Vec::new();
            for e in 0..t {
                if used & (1 << e) != 0 {
                    continue;
                }
                let alpha = self.alphas[e];
                // Same alpha leads to the same state as one already tried.
                if tried.contains(&alpha) {
                    continue;
                }
                tried.push(alpha);
                let next = prefix + alpha;
                // The prefix after the final expert is unconstrained.
                if m + 1 < t && band_check(next, m + 1, self.beta, self.k).is_some() {
                    continue;
                }
                self.path.push(e);
                if self.extend(used | (1 << e), next) {
                    return true;
                }
                self.path.pop();
            }
            self.dead.insert(used);
            false
        }
    }

    let mut search = Search {
        alphas: &costs.alphas,
        beta: costs.beta,
        k,
        dead: HashSet::new(),
        path: Vec::with_capacity(t),
    };
    let found = search.extend(0, 0.0);
    let order = if found { search.path } else { (0..t).collect() };
    let check = check_constraints(&order, costs, k)?;
    debug_assert_eq!(check.feasible, found);
    let mut schedule = Schedule::from_check(order, check, Method::Exact);
    if !schedule.feasible {
        schedule.diagnosis = Some(classify(costs));
    }
    Ok(schedule)
}

/// Greedy first; when it fails and `T <= EXACT_MAX_T`, the exact search.
/// A greedy failure that the exact search resolves is flagged as a
/// counterexample and logged.
pub fn plan(costs: &CostVector, k: usize) -> Result<Schedule> {
    let greedy = greedy_order(costs, k)?;
    if greedy.feasible || costs.len() > EXACT_MAX_T {
        return Ok(greedy);
    }
    let exact = exact_order(costs, k, EXACT_MAX_T)?;
    if !exact.feasible {
        return Ok(greedy);
    }
    log::info!(
        "greedy counterexample: alphas={:?} beta={} k={k}; exact order {:?}",
        costs.alphas,
        costs.beta,
        exact.order
    );
    Ok(Schedule {
        method: Method::ExactFallback,
        greedy_counterexample: true,
        ..exact
    })
}

/// Feasible when some order fits the bands (found by greedy, else by the
/// exact search when `T <= EXACT_MAX_T`). Otherwise classifies the cause.
///
/// For `T > EXACT_MAX_T` a greedy failure is taken as infeasibility without
/// proof.
pub fn diagnose(costs: &CostVector, k: usize) -> Result<Diagnosis> {
    let schedule = plan(costs, k)?;
    Ok(if schedule.feasible {
        Diagnosis::Feasible
    } else {
        classify(costs).into()
    })
}

/// Cause of an infeasible instance. Depends only on the multiset of alphas.
fn classify(costs: &CostVector) -> Infeasibility {
    let t = costs.len();
    let mut sorted = costs.alphas.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let best_cover: f64 = sorted.iter().take(t.saturating_sub(1)).sum();
    let need = (t.saturating_sub(1)) as f64 * costs.beta;
    if best_cover < need - tolerance(need) {
        Infeasibility::TooLittleCompute
    } else {
        Infeasibility::Imbalanced
    }
}
