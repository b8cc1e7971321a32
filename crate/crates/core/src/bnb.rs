//! Depth-first branch and bound over the mandatory search tree, plus a
//! Held–Karp dynamic-programming baseline.
//!
//! The mandatory search tree of an instance roots at `start`; each level
//! picks the next mandatory node to visit, and a leaf closes the walk with
//! the final hop to `dest`. Edges are weighted by metric-closure costs, so a
//! root-to-leaf path is exactly one visiting order. Branches are cut with
//! the π lower bound: half the sum of the two cheapest closure edges
//! incident to every remaining node (one each for the tour's entry and exit
//! endpoints).

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::graph::ShortestPathTable;
use crate::planning::Instance;

/// Hard cap on the DP state space (memory grows as `2^|M|·|M|`).
pub const DEFAULT_DP_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum BnbError {
    #[error("need at least two nodes besides x in D; got {0}")]
    TooFewNodes(usize),
    #[error("mandatory set size {size} exceeds the DP cap {cap}")]
    CapExceeded { size: usize, cap: usize },
    #[error("{0:?} is not a permutation of the instance's mandatory set")]
    NotAPermutation(Vec<usize>),
    #[error("solver timed out after {0:?}")]
    Timeout(Duration),
}

/// One node of the mandatory search tree.
#[derive(Debug, Clone)]
pub struct TreeNode {
    /// Root = the instance's start; internal nodes = mandatory nodes.
    pub current: usize,
    /// Mandatory nodes not yet on the root-to-node prefix.
    pub remaining: Vec<usize>,
    /// Accumulated metric-closure cost of the prefix.
    pub g: f64,
}

/// Search-effort accounting for one branch-and-bound run.
#[derive(Debug, Clone, Default)]
pub struct SearchStats {
    /// Expanded mandatory children plus completed leaves; the root is free.
    pub node_visits: u64,
    /// Children discarded by the bound test.
    pub cuts: u64,
    /// `(node_visits, incumbent cost)` each time the incumbent improves; an
    /// initial upper bound contributes the first entry at zero visits.
    pub incumbent_trace: Vec<(u64, f64)>,
    pub elapsed: Duration,
}

/// Result of [`dfs_branch_and_bound`].
#[derive(Debug, Clone)]
pub struct BnbResult {
    /// An optimal visiting order of the mandatory nodes.
    pub order: Vec<usize>,
    pub cost: f64,
    pub stats: SearchStats,
}

/// Result of [`dp_solve`].
#[derive(Debug, Clone)]
pub struct DpResult {
    pub order: Vec<usize>,
    pub cost: f64,
    /// Number of `(subset, last)` DP states evaluated.
    pub state_visits: u64,
}

/// The two smallest shortest-path costs from `x` into `D \ {x}`.
///
/// `d` may include `x`; duplicates are ignored. Errors unless at least two
/// other nodes remain.
pub fn min1_min2(x: usize, d: &[usize], t: &ShortestPathTable) -> Result<(f64, f64), BnbError> {
    let mut others: Vec<usize> = d.iter().copied().filter(|&v| v != x).collect();
    others.sort_unstable();
    others.dedup();
    if others.len() < 2 {
        return Err(BnbError::TooFewNodes(others.len()));
    }
    Ok(two_smallest(x, &others, t))
}

fn two_smallest(x: usize, others: &[usize], t: &ShortestPathTable) -> (f64, f64) {
    let mut m1 = f64::INFINITY;
    let mut m2 = f64::INFINITY;
    for &v in others {
        let c = t.cost(x, v);
        if c < m1 {
            m2 = m1;
            m1 = c;
        } else if c < m2 {
            m2 = c;
        }
    }
    // A single candidate leaves m2 unset; fall back to m1 (exact in that
    // degenerate case: the tour enters and leaves x over the same edge).
    if m2.is_infinite() {
        m2 = m1;
    }
    (m1, m2)
}

/// Lower bound on the cost of visiting all of `r` from `v` and ending at
/// `dest`, over `D = {v} ∪ r ∪ {dest}`:
///
/// `π(v) = ½ (min₁(v) + min₁(dest) + Σ_{x∈r} (min₁(x) + min₂(x)))`
///
/// Every node of the remaining tour is entered and left once (endpoints:
/// entered or left only), each crossing is counted from both sides, and no
/// crossing can beat the two cheapest incident closure edges — hence the
/// halved sum never exceeds the true remaining cost.
pub fn pi_heuristic(v: usize, r: &[usize], dest: usize, t: &ShortestPathTable) -> f64 {
    let mut d: Vec<usize> = Vec::with_capacity(r.len() + 2);
    d.push(v);
    d.extend_from_slice(r);
    d.push(dest);
    d.sort_unstable();
    d.dedup();
    if d.len() < 2 {
        return 0.0; // v == dest and nothing remains
    }
    let single = |x: usize| {
        let others: Vec<usize> = d.iter().copied().filter(|&y| y != x).collect();
        two_smallest(x, &others, t)
    };
    let mut total = single(v).0 + single(dest).0;
    for &x in r {
        let (m1, m2) = single(x);
        total += m1 + m2;
    }
    total / 2.0
}

/// Depth-first branch and bound. Children are tried in node-index order —
/// the policy is deliberately blind to edge costs, and is held identical
/// with and without an initial bound, so a valid bound can only enable
/// earlier cuts. A child is cut iff `g_child + π(child) ≥ incumbent`. The
/// incumbent starts at `initial_ub` when given, else +∞, and is only
/// replaced by strictly better solutions, so a tying bound keeps its own
/// order as the answer.
pub fn dfs_branch_and_bound(
    s: &Instance,
    t: &ShortestPathTable,
    initial_ub: Option<(f64, Vec<usize>)>,
    timeout: Option<Duration>,
) -> Result<BnbResult, BnbError> {
    assert!(s.is_normalized(), "branch and bound needs start ∉ M: {s}");
    assert!(s.is_valid_for(t.node_count()), "instance out of range: {s}");
    let started = Instant::now();
    let mut stats = SearchStats::default();
    let (mut best_cost, mut best_order) = match initial_ub {
        Some((cost, order)) => {
            stats.incumbent_trace.push((0, cost));
            (cost, order)
        }
        None => (f64::INFINITY, Vec::new()),
    };

    struct Walk<'a> {
        t: &'a ShortestPathTable,
        dest: usize,
        prefix: Vec<usize>,
        timeout: Option<Duration>,
        started: Instant,
    }

    fn descend(
        w: &mut Walk<'_>,
        current: usize,
        remaining: &[usize],
        g: f64,
        best_cost: &mut f64,
        best_order: &mut Vec<usize>,
        stats: &mut SearchStats,
    ) -> Result<(), BnbError> {
        if let Some(limit) = w.timeout {
            let elapsed = w.started.elapsed();
            if elapsed > limit {
                return Err(BnbError::Timeout(elapsed));
            }
        }
        if remaining.is_empty() {
            stats.node_visits += 1; // implicit leaf: the final hop to dest
            let total = g + w.t.cost(current, w.dest);
            if total < *best_cost {
                *best_cost = total;
                best_order.clone_from(&w.prefix);
                stats.incumbent_trace.push((stats.node_visits, total));
            }
            return Ok(());
        }
        for &child in remaining {
            let g_child = g + w.t.cost(current, child);
            let rest: Vec<usize> = remaining.iter().copied().filter(|&r| r != child).collect();
            if g_child + pi_heuristic(child, &rest, w.dest, w.t) >= *best_cost {
                stats.cuts += 1;
                continue;
            }
            stats.node_visits += 1;
            w.prefix.push(child);
            let r = descend(w, child, &rest, g_child, best_cost, best_order, stats);
            w.prefix.pop();
            r?;
        }
        Ok(())
    }

    let mut walk = Walk {
        t,
        dest: s.dest(),
        prefix: Vec::new(),
        timeout,
        started,
    };
    descend(
        &mut walk,
        s.start(),
        s.mandatory(),
        0.0,
        &mut best_cost,
        &mut best_order,
        &mut stats,
    )?;
    stats.elapsed = started.elapsed();
    Ok(BnbResult {
        order: best_order,
        cost: best_cost,
        stats,
    })
}

/// Held–Karp dynamic program over `(visited subset of M, last mandatory)`
/// states. Exact; memory and time grow as `2^|M|·|M|`, guarded by `cap`.
pub fn dp_solve(
    s: &Instance,
    t: &ShortestPathTable,
    cap: usize,
    timeout: Option<Duration>,
) -> Result<DpResult, BnbError> {
    assert!(s.is_normalized(), "dynamic program needs start ∉ M: {s}");
    assert!(s.is_valid_for(t.node_count()), "instance out of range: {s}");
    let m = s.mandatory();
    let q = m.len();
    if q > cap {
        return Err(BnbError::CapExceeded { size: q, cap });
    }
    if q == 0 {
        return Ok(DpResult {
            order: Vec::new(),
            cost: t.cost(s.start(), s.dest()),
            state_visits: 0,
        });
    }
    let started = Instant::now();
    let full = (1usize << q) - 1;
    let mut cost = vec![f64::INFINITY; (full + 1) * q];
    let mut parent = vec![u8::MAX; (full + 1) * q];
    let mut visits = 0u64;
    for (j, &mj) in m.iter().enumerate() {
        cost[(1 << j) * q + j] = t.cost(s.start(), mj);
        visits += 1;
    }
    for mask in 1..=full {
        if mask.count_ones() < 2 {
            continue;
        }
        if let Some(limit) = timeout {
            let elapsed = started.elapsed();
            if elapsed > limit {
                return Err(BnbError::Timeout(elapsed));
            }
        }
        for j in 0..q {
            if mask & (1 << j) == 0 {
                continue;
            }
            let prev_mask = mask & !(1 << j);
            let mut best = f64::INFINITY;
            let mut arg = u8::MAX;
            for last in 0..q {
                if prev_mask & (1 << last) == 0 {
                    continue;
                }
                let cand = cost[prev_mask * q + last] + t.cost(m[last], m[j]);
                if cand < best {
                    best = cand;
                    arg = last as u8;
                }
            }
            cost[mask * q + j] = best;
            parent[mask * q + j] = arg;
            visits += 1;
        }
    }
    let mut best = f64::INFINITY;
    let mut arg = usize::MAX;
    for j in 0..q {
        let cand = cost[full * q + j] + t.cost(m[j], s.dest());
        if cand < best {
            best = cand;
            arg = j;
        }
    }
    let mut order_idx = Vec::with_capacity(q);
    let mut mask = full;
    let mut j = arg;
    while j != usize::MAX {
        order_idx.push(j);
        let p = parent[mask * q + j];
        mask &= !(1 << j);
        j = if p == u8::MAX { usize::MAX } else { p as usize };
    }
    order_idx.reverse();
    Ok(DpResult {
        order: order_idx.into_iter().map(|j| m[j]).collect(),
        cost: best,
        state_visits: visits,
    })
}

/// Expands a visiting order into the concrete walk it denotes: the
/// concatenation of shortest paths `start → o₁ → … → o_q → dest`, with
/// segment junctions written once.
pub fn order_to_path(
    s: &Instance,
    order: &[usize],
    t: &ShortestPathTable,
) -> Result<(Vec<usize>, f64), BnbError> {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != s.mandatory() {
        return Err(BnbError::NotAPermutation(order.to_vec()));
    }
    let mut waypoints = Vec::with_capacity(order.len() + 2);
    waypoints.push(s.start());
    waypoints.extend_from_slice(order);
    waypoints.push(s.dest());
    let mut path = vec![s.start()];
    let mut cost = 0.0;
    for pair in waypoints.windows(2) {
        cost += t.cost(pair[0], pair[1]);
        let seg = t.reconstruct_path(pair[0], pair[1]);
        path.extend_from_slice(&seg[1..]);
    }
    Ok((path, cost))
}
