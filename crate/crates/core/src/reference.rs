//! Brute-force reference implementations used to validate the fast solvers.
//!
//! Everything here trades speed for obviousness: exhaustive enumeration with
//! no pruning, usable only on small inputs. Production code should never
//! call into this module; tests lean on it as an independent oracle.

use crate::graph::{ShortestPathTable, WeightedGraph};
use crate::planning::{Instance, SearchResult};

/// Shortest-path cost by enumerating every simple path from `i` to `j`.
pub fn shortest_cost_by_path_enumeration(g: &WeightedGraph, i: usize, j: usize) -> f64 {
    fn walk(
        g: &WeightedGraph,
        at: usize,
        target: usize,
        cost: f64,
        seen: &mut Vec<bool>,
        best: &mut f64,
    ) {
        if at == target {
            *best = best.min(cost);
            return;
        }
        for &(next, w) in g.neighbors(at) {
            if !seen[next] {
                seen[next] = true;
                walk(g, next, target, cost + w, seen, best);
                seen[next] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut seen = vec![false; g.node_count()];
    seen[i] = true;
    walk(g, i, j, 0.0, &mut seen, &mut best);
    best
}

/// Minimum spanning tree weight over `nodes` in the metric closure, found by
/// trying every (k−1)-subset of closure edges and keeping the spanning ones.
pub fn min_spanning_tree_by_enumeration(t: &ShortestPathTable, nodes: &[usize]) -> f64 {
    let mut members = nodes.to_vec();
    members.sort_unstable();
    members.dedup();
    let k = members.len();
    if k <= 1 {
        return 0.0;
    }
    let mut edges = Vec::new();
    for a in 0..k {
        for b in (a + 1)..k {
            edges.push((a, b, t.cost(members[a], members[b])));
        }
    }
    let mut best = f64::INFINITY;
    let picks = k - 1;
    let mut chosen = vec![0usize; picks];
    fn rec(
        edges: &[(usize, usize, f64)],
        k: usize,
        from: usize,
        depth: usize,
        chosen: &mut Vec<usize>,
        best: &mut f64,
    ) {
        if depth == chosen.len() {
            // Union-find connectivity over the chosen edge set.
            let mut parent: Vec<usize> = (0..k).collect();
            fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
                while parent[x] != x {
                    parent[x] = parent[parent[x]];
                    x = parent[x];
                }
                x
            }
            let mut weight = 0.0;
            let mut merged = 0;
            for &c in chosen.iter() {
                let (a, b, w) = edges[c];
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra] = rb;
                    merged += 1;
                }
                weight += w;
            }
            if merged == k - 1 {
                *best = best.min(weight);
            }
            return;
        }
        for e in from..edges.len() {
            chosen[depth] = e;
            rec(edges, k, e + 1, depth + 1, chosen, best);
        }
    }
    rec(&edges, k, 0, 0, &mut chosen, &mut best);
    best
}

/// Calls `f` with every permutation of `items` (Heap's algorithm).
pub fn for_each_permutation<T: Copy>(items: &[T], mut f: impl FnMut(&[T])) {
    fn rec<T: Copy>(a: &mut [T], k: usize, f: &mut impl FnMut(&[T])) {
        if k <= 1 {
            let snapshot: Vec<T> = a.to_vec();
            f(&snapshot);
            return;
        }
        for i in 0..k {
            rec(a, k - 1, f);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
    }
    let mut buf = items.to_vec();
    let n = buf.len();
    rec(&mut buf, n, &mut f);
}

/// Exact optimal cost of a normalized instance by trying every visiting
/// order of the mandatory nodes over the metric closure.
pub fn optimal_cost_by_order_enumeration(s: &Instance, t: &ShortestPathTable) -> f64 {
    assert!(s.is_normalized(), "order enumeration needs start ∉ M: {s}");
    let m = s.mandatory();
    if m.is_empty() {
        return t.cost(s.start(), s.dest());
    }
    let mut best = f64::INFINITY;
    for_each_permutation(m, |order| {
        let mut cost = t.cost(s.start(), order[0]);
        for pair in order.windows(2) {
            cost += t.cost(pair[0], pair[1]);
        }
        cost += t.cost(*order.last().unwrap(), s.dest());
        best = best.min(cost);
    });
    best
}

/// Single-source shortest-path costs that never enter a node of `avoid`
/// (the source itself may appear in `avoid`; only arrivals are forbidden).
pub fn dijkstra_avoiding(g: &WeightedGraph, source: usize, avoid: &[usize]) -> Vec<f64> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let n = g.node_count();
    let mut banned = vec![false; n];
    for &a in avoid {
        banned[a] = true;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Reverse((crate::graph::HeapCost(0.0), source)));
    while let Some(Reverse((crate::graph::HeapCost(cost), node))) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        for &(next, w) in g.neighbors(node) {
            if banned[next] {
                continue;
            }
            let cand = cost + w;
            if cand < dist[next] {
                dist[next] = cand;
                heap.push(Reverse((crate::graph::HeapCost(cand), next)));
            }
        }
    }
    dist
}

/// Every mandatory node that some optimal solution of `s` visits first.
///
/// A node `m ∈ M` qualifies iff reaching `m` while avoiding the rest of `M`,
/// then completing `(m, dest, M \ {m})` optimally, costs exactly the optimum
/// of `s`.
pub fn optimal_first_mandatory_nodes(
    s: &Instance,
    g: &WeightedGraph,
    t: &ShortestPathTable,
) -> Vec<usize> {
    assert!(s.is_normalized(), "label oracle needs start ∉ M: {s}");
    let opt = optimal_cost_by_order_enumeration(s, t);
    let mut out = Vec::new();
    for &m in s.mandatory() {
        let avoid: Vec<usize> = s.mandatory().iter().copied().filter(|&x| x != m).collect();
        let reach = dijkstra_avoiding(g, s.start(), &avoid)[m];
        if !reach.is_finite() {
            continue;
        }
        let tail = optimal_cost_by_order_enumeration(
            &Instance::new(m, s.dest(), avoid.iter().copied()),
            t,
        );
        if (reach + tail - opt).abs() <= 1e-9 * opt.abs().max(1.0) {
            out.push(m);
        }
    }
    out
}

/// Checks the three feasibility invariants of a solver result against the
/// instance it claims to solve.
pub fn validate_search_result(
    s: &Instance,
    g: &WeightedGraph,
    r: &SearchResult,
) -> Result<(), String> {
    if r.path.first() != Some(&s.start()) {
        return Err(format!("path does not begin at {}", s.start()));
    }
    if r.path.last() != Some(&s.dest()) {
        return Err(format!("path does not end at {}", s.dest()));
    }
    let mut total = 0.0;
    for pair in r.path.windows(2) {
        match g.edge_weight(pair[0], pair[1]) {
            Some(w) => total += w,
            None => return Err(format!("{} and {} are not adjacent", pair[0], pair[1])),
        }
    }
    if (total - r.cost).abs() > 1e-9 * r.cost.abs().max(1.0) {
        return Err(format!("cost {} but edges sum to {total}", r.cost));
    }
    // Arrival semantics: a mandatory node counts once the path enters it;
    // the initial position alone does not satisfy membership.
    for &m in s.mandatory() {
        if !r.path[1..].contains(&m) {
            return Err(format!("mandatory node {m} never visited"));
        }
    }
    Ok(())
}
