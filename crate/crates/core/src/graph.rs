//! Weighted undirected graphs, their metric closure, and graph I/O.
//!
//! The text format is line oriented: a header `n m`, then `m` lines `u v w`
//! with 0-based endpoints and a strictly positive decimal weight. Lines
//! starting with `#` are comments.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::parallel;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: nonpositive weight {weight}")]
    NonPositiveWeight { line: usize, weight: f64 },
    #[error("line {line}: self-loop on node {node}")]
    SelfLoop { line: usize, node: usize },
    #[error("line {line}: node index {node} out of range (graph has {nodes} nodes)")]
    IndexOutOfRange { line: usize, node: usize, nodes: usize },
    #[error("disconnected graph: node {unreached} unreachable from node 0")]
    Disconnected { unreached: usize },
    #[error("graph must have at least one node")]
    Empty,
}

/// Undirected connected graph with strictly positive edge weights.
///
/// Each edge is stored once; parallel edges are collapsed to the minimum
/// weight at construction. Immutable after construction.
#[derive(Debug, Clone)]
pub struct WeightedGraph {
    node_count: usize,
    edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl WeightedGraph {
    /// Builds a graph from an edge list, validating every invariant.
    pub fn from_edges(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, GraphError> {
        let numbered = edges.into_iter().map(|e| (0usize, e)).collect::<Vec<_>>();
        Self::from_numbered_edges(node_count, numbered)
    }

    fn from_numbered_edges(
        node_count: usize,
        edges: Vec<(usize, (usize, usize, f64))>,
    ) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::Empty);
        }
        // Collapse parallel edges to the minimum weight, keyed on (min,max).
        let mut best: std::collections::HashMap<(usize, usize), f64> =
            std::collections::HashMap::new();
        for (line, (u, v, w)) in edges {
            for node in [u, v] {
                if node >= node_count {
                    return Err(GraphError::IndexOutOfRange {
                        line,
                        node,
                        nodes: node_count,
                    });
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop { line, node: u });
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(GraphError::NonPositiveWeight { line, weight: w });
            }
            let key = (u.min(v), u.max(v));
            let entry = best.entry(key).or_insert(f64::INFINITY);
            if w < *entry {
                *entry = w;
            }
        }
        let mut dedup: Vec<(usize, usize, f64)> =
            best.into_iter().map(|((u, v), w)| (u, v, w)).collect();
        dedup.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v, w) in &dedup {
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
        for list in &mut adjacency {
            list.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let g = Self {
            node_count,
            edges: dedup,
            adjacency,
        };
        if let Some(unreached) = g.first_unreachable() {
            return Err(GraphError::Disconnected { unreached });
        }
        Ok(g)
    }

    /// Parses the text format described in the module docs.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut header: Option<(usize, usize)> = None;
        let mut edges: Vec<(usize, (usize, usize, f64))> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match header {
                None => {
                    if fields.len() != 2 {
                        return Err(GraphError::Parse {
                            line: line_no,
                            msg: format!("expected header \"n m\", got {line:?}"),
                        });
                    }
                    let n = parse_field::<usize>(fields[0], line_no, "node count")?;
                    let m = parse_field::<usize>(fields[1], line_no, "edge count")?;
                    header = Some((n, m));
                }
                Some((_, m)) => {
                    if edges.len() == m {
                        return Err(GraphError::Parse {
                            line: line_no,
                            msg: format!("unexpected extra line after {m} edges"),
                        });
                    }
                    if fields.len() != 3 {
                        return Err(GraphError::Parse {
                            line: line_no,
                            msg: format!("expected \"u v w\", got {line:?}"),
                        });
                    }
                    let u = parse_field::<usize>(fields[0], line_no, "node index")?;
                    let v = parse_field::<usize>(fields[1], line_no, "node index")?;
                    let w = parse_field::<f64>(fields[2], line_no, "edge weight")?;
                    edges.push((line_no, (u, v, w)));
                }
            }
        }
        let (n, m) = header.ok_or(GraphError::Parse {
            line: 1,
            msg: "missing header line".into(),
        })?;
        if edges.len() != m {
            return Err(GraphError::Parse {
                line: text.lines().count(),
                msg: format!("expected {m} edge lines, found {}", edges.len()),
            });
        }
        Self::from_numbered_edges(n, edges)
    }

    /// Renders the graph in the same text format `parse` accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.node_count, self.edges.len());
        for &(u, v, w) in &self.edges {
            let _ = writeln!(out, "{u} {v} {w}");
        }
        out
    }

    /// Generates a connected random graph: a random spanning tree plus extra
    /// edges until the average degree is roughly met. Weights are drawn as
    /// integers from `weights` so benchmark optima compare exactly.
    ///
    /// The same seed always yields the same graph.
    pub fn random_connected(n: usize, avg_degree: f64, seed: u64) -> Self {
        Self::random_connected_weighted(n, avg_degree, 1..=100, seed)
    }

    /// [`Self::random_connected`] with an explicit integer weight range.
    pub fn random_connected_weighted(
        n: usize,
        avg_degree: f64,
        weights: std::ops::RangeInclusive<u32>,
        seed: u64,
    ) -> Self {
        assert!(n >= 1, "graph needs at least one node");
        assert!(avg_degree >= 0.0, "average degree must be nonnegative");
        let (w_lo, w_hi) = (*weights.start().max(&1), *weights.end());
        let w_hi = w_hi.max(w_lo);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut present = std::collections::HashSet::new();
        let mut edges: Vec<(usize, usize, f64)> = Vec::new();
        let push = |u: usize, v: usize, rng: &mut ChaCha8Rng,
                        present: &mut std::collections::HashSet<(usize, usize)>,
                        edges: &mut Vec<(usize, usize, f64)>| {
            let key = (u.min(v), u.max(v));
            if present.insert(key) {
                let w = rng.gen_range(w_lo..=w_hi) as f64;
                edges.push((key.0, key.1, w));
            }
        };
        // Spanning tree keeps the result connected for any extra-edge count.
        for v in 1..n {
            let u = rng.gen_range(0..v);
            push(u, v, &mut rng, &mut present, &mut edges);
        }
        let max_edges = n * (n.saturating_sub(1)) / 2;
        let target = ((avg_degree * n as f64 / 2.0).round() as usize)
            .clamp(n.saturating_sub(1), max_edges);
        if target > edges.len() {
            let mut pool: Vec<(usize, usize)> = Vec::with_capacity(max_edges - edges.len());
            for u in 0..n {
                for v in (u + 1)..n {
                    if !present.contains(&(u, v)) {
                        pool.push((u, v));
                    }
                }
            }
            let extra = (target - edges.len()).min(pool.len());
            // Partial Fisher-Yates: the first `extra` entries are a uniform draw.
            for i in 0..extra {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
                let (u, v) = pool[i];
                push(u, v, &mut rng, &mut present, &mut edges);
            }
        }
        Self::from_edges(n, edges).expect("generator output is connected by construction")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Weight of the edge `(u, v)` if present.
    pub fn edge_weight(&self, u: usize, v: usize) -> Option<f64> {
        self.adjacency[u]
            .iter()
            .find(|&&(n, _)| n == v)
            .map(|&(_, w)| w)
    }

    fn first_unreachable(&self) -> Option<usize> {
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.iter().position(|&s| !s)
    }

    /// Single-source shortest paths; returns `(dist, parent)` with
    /// `parent[source] == source`.
    pub(crate) fn dijkstra(&self, source: usize) -> (Vec<f64>, Vec<usize>) {
        let n = self.node_count;
        let mut dist = vec![f64::INFINITY; n];
        let mut parent = vec![usize::MAX; n];
        let mut heap: BinaryHeap<Reverse<(HeapCost, usize)>> = BinaryHeap::new();
        dist[source] = 0.0;
        parent[source] = source;
        heap.push(Reverse((HeapCost(0.0), source)));
        while let Some(Reverse((HeapCost(cost), node))) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for &(next, w) in &self.adjacency[node] {
                let cand = cost + w;
                if cand < dist[next] {
                    dist[next] = cand;
                    parent[next] = node;
                    heap.push(Reverse((HeapCost(cand), next)));
                }
            }
        }
        (dist, parent)
    }
}

/// f64 wrapper ordered by `total_cmp` so it can live in a heap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct HeapCost(pub f64);

impl Eq for HeapCost {}

impl Ord for HeapCost {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for HeapCost {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn parse_field<T: std::str::FromStr>(
    field: &str,
    line: usize,
    what: &str,
) -> Result<T, GraphError> {
    field.parse().map_err(|_| GraphError::Parse {
        line,
        msg: format!("invalid {what} {field:?}"),
    })
}

/// Metric closure of a graph: all-pairs shortest path costs plus next-hop
/// matrix for path reconstruction.
#[derive(Debug, Clone)]
pub struct ShortestPathTable {
    n: usize,
    cost: Vec<f64>,
    next_hop: Vec<u32>,
}

impl ShortestPathTable {
    /// Runs Dijkstra from every source (in parallel when enabled).
    pub fn compute(g: &WeightedGraph) -> Self {
        Self::assemble(g, parallel::map_indexed(g.node_count(), |s| g.dijkstra(s)))
    }

    /// Sequential twin of [`Self::compute`]; same output, one thread.
    pub fn compute_seq(g: &WeightedGraph) -> Self {
        Self::assemble(
            g,
            parallel::map_indexed_seq(g.node_count(), |s| g.dijkstra(s)),
        )
    }

    fn assemble(g: &WeightedGraph, runs: Vec<(Vec<f64>, Vec<usize>)>) -> Self {
        let n = g.node_count();
        let mut cost = vec![0.0; n * n];
        let mut next_hop = vec![0u32; n * n];
        for (src, (dist, parent)) in runs.into_iter().enumerate() {
            // next_hop[src][j] = first node after src on the path to j.
            // parent[] settles shallow-to-deep, so resolve by walking up with
            // memoization on already-filled entries.
            let row = src * n;
            for j in 0..n {
                cost[row + j] = dist[j];
            }
            next_hop[row + src] = src as u32;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
            for j in order {
                if j == src {
                    continue;
                }
                let p = parent[j];
                debug_assert!(p != usize::MAX, "graph is connected");
                next_hop[row + j] = if p == src {
                    j as u32
                } else {
                    next_hop[row + p]
                };
            }
        }
        Self { n, cost, next_hop }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Shortest-path cost between `i` and `j`.
    #[inline]
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.n + j]
    }

    /// Materializes the shortest path from `i` to `j` (inclusive ends).
    pub fn reconstruct_path(&self, i: usize, j: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while cur != j {
            cur = self.next_hop[cur * self.n + j] as usize;
            path.push(cur);
        }
        path
    }

    /// Total weight of a minimum spanning tree over `nodes` in the metric
    /// closure (Prim; ties broken toward the lowest node index).
    ///
    /// `nodes` must be nonempty; duplicates are ignored.
    pub fn mst_weight(&self, nodes: &[usize]) -> f64 {
        assert!(!nodes.is_empty(), "mst_weight over empty node set");
        let mut members: Vec<usize> = nodes.to_vec();
        members.sort_unstable();
        members.dedup();
        let k = members.len();
        let mut in_tree = vec![false; k];
        let mut attach = vec![f64::INFINITY; k];
        in_tree[0] = true;
        for (idx, &m) in members.iter().enumerate().skip(1) {
            attach[idx] = self.cost(members[0], m);
        }
        let mut total = 0.0;
        for _ in 1..k {
            let mut pick = usize::MAX;
            for idx in 0..k {
                if !in_tree[idx] && (pick == usize::MAX || attach[idx] < attach[pick]) {
                    pick = idx;
                }
            }
            total += attach[pick];
            in_tree[pick] = true;
            for idx in 0..k {
                if !in_tree[idx] {
                    let c = self.cost(members[pick], members[idx]);
                    if c < attach[idx] {
                        attach[idx] = c;
                    }
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn path_graph(n: usize) -> WeightedGraph {
        WeightedGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1, 1.0))).unwrap()
    }

    #[test]
    fn parse_two_node_graph() {
        let g = WeightedGraph::parse("2 1\n0 1 5.0").unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edges(), &[(0, 1, 5.0)]);
    }

    #[test]
    fn parse_single_node() {
        let g = WeightedGraph::parse("1 0").unwrap();
        assert_eq!(g.node_count(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn parse_rejects_disconnected() {
        let err = WeightedGraph::parse("3 1\n0 1 1.0").unwrap_err();
        assert!(matches!(err, GraphError::Disconnected { unreached: 2 }));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let err = WeightedGraph::parse("2 1\n# comment\n0 x 1.0").unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_nonpositive_weight() {
        let err = WeightedGraph::parse("2 1\n0 1 0").unwrap_err();
        assert!(matches!(err, GraphError::NonPositiveWeight { line: 2, .. }));
    }

    #[test]
    fn parse_rejects_self_loop_and_bad_index() {
        assert!(matches!(
            WeightedGraph::parse("2 1\n1 1 2.0").unwrap_err(),
            GraphError::SelfLoop { line: 2, node: 1 }
        ));
        assert!(matches!(
            WeightedGraph::parse("2 1\n0 2 2.0").unwrap_err(),
            GraphError::IndexOutOfRange { node: 2, .. }
        ));
    }

    #[test]
    fn parallel_edges_collapse_to_minimum() {
        let g = WeightedGraph::from_edges(2, [(0, 1, 5.0), (1, 0, 3.0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1, 3.0)]);
    }

    #[test]
    fn text_round_trip() {
        let g = WeightedGraph::random_connected(9, 2.5, 11);
        let again = WeightedGraph::parse(&g.to_text()).unwrap();
        assert_eq!(g.edges(), again.edges());
    }

    #[test]
    fn random_single_node() {
        let g = WeightedGraph::random_connected(1, 3.0, 42);
        assert_eq!(g.node_count(), 1);
        assert!(g.edges().is_empty());
    }

    #[test]
    fn random_graph_deterministic() {
        let a = WeightedGraph::random_connected(20, 3.0, 7);
        let b = WeightedGraph::random_connected(20, 3.0, 7);
        assert_eq!(a.edges(), b.edges());
    }

    #[test]
    fn random_graph_connected_by_traversal() {
        // Breadth-first reachability from node 0 must cover all 23 nodes.
        let g = WeightedGraph::random_connected(23, 3.0, 1);
        let mut seen = vec![false; 23];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in g.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn apsp_single_edge() {
        let g = WeightedGraph::from_edges(2, [(0, 1, 5.0)]).unwrap();
        let t = ShortestPathTable::compute(&g);
        assert_eq!(t.cost(0, 1), 5.0);
        assert_eq!(t.cost(0, 0), 0.0);
    }

    #[test]
    fn apsp_path_graph_chain_sum() {
        let t = ShortestPathTable::compute(&path_graph(4));
        assert_eq!(t.cost(0, 3), 3.0);
    }

    #[test]
    fn apsp_matches_brute_force_on_random_graph() {
        let g = WeightedGraph::random_connected(6, 2.5, 3);
        let t = ShortestPathTable::compute(&g);
        for i in 0..6 {
            for j in 0..6 {
                let expected = crate::reference::shortest_cost_by_path_enumeration(&g, i, j);
                assert!(
                    (t.cost(i, j) - expected).abs() <= 1e-9 * expected.abs().max(1.0),
                    "cost[{i}][{j}] = {} but enumeration found {expected}",
                    t.cost(i, j)
                );
            }
        }
    }

    #[test]
    fn apsp_seq_matches_parallel() {
        let g = WeightedGraph::random_connected(17, 3.0, 5);
        let a = ShortestPathTable::compute(&g);
        let b = ShortestPathTable::compute_seq(&g);
        assert_eq!(a.cost, b.cost);
        assert_eq!(a.next_hop, b.next_hop);
    }

    #[test]
    fn reconstruct_identity() {
        let t = ShortestPathTable::compute(&path_graph(4));
        assert_eq!(t.reconstruct_path(2, 2), vec![2]);
    }

    #[test]
    fn reconstruct_unique_path() {
        let t = ShortestPathTable::compute(&path_graph(4));
        assert_eq!(t.reconstruct_path(0, 3), vec![0, 1, 2, 3]);
    }

    #[test]
    fn reconstructed_cost_matches_table() {
        let g = WeightedGraph::random_connected(6, 2.8, 9);
        let t = ShortestPathTable::compute(&g);
        for i in 0..6 {
            for j in 0..6 {
                let path = t.reconstruct_path(i, j);
                assert_eq!(path[0], i);
                assert_eq!(*path.last().unwrap(), j);
                let mut total = 0.0;
                for pair in path.windows(2) {
                    total += g.edge_weight(pair[0], pair[1]).expect("adjacent");
                }
                assert!((total - t.cost(i, j)).abs() <= 1e-12 * t.cost(i, j).abs().max(1.0));
            }
        }
    }

    #[test]
    fn triangle_inequality_on_seeded_graphs() {
        for seed in 0..100 {
            let n = 4 + (seed as usize % 9);
            let g = WeightedGraph::random_connected(n, 2.7, seed);
            let t = ShortestPathTable::compute(&g);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        assert!(t.cost(i, j) <= t.cost(i, k) + t.cost(k, j) + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn mst_singleton_is_zero() {
        let t = ShortestPathTable::compute(&path_graph(4));
        assert_eq!(t.mst_weight(&[2]), 0.0);
    }

    #[test]
    fn mst_two_nodes_single_edge() {
        let t = ShortestPathTable::compute(&path_graph(4));
        assert_eq!(t.mst_weight(&[1, 2]), 1.0);
    }

    #[test]
    fn mst_three_nodes_on_path_graph() {
        // Spanning trees of {0,1,3}: {01,13}=3, {01,03}=4, {13,03}=5.
        let t = ShortestPathTable::compute(&path_graph(4));
        assert_eq!(t.mst_weight(&[0, 1, 3]), 3.0);
    }

    #[test]
    fn mst_never_beats_enumerated_spanning_trees() {
        for seed in 0..12 {
            let g = WeightedGraph::random_connected(8, 3.0, 100 + seed);
            let t = ShortestPathTable::compute(&g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for size in 2..=5usize {
                let mut nodes: Vec<usize> = (0..8).collect();
                for i in 0..size {
                    let j = rng.gen_range(i..nodes.len());
                    nodes.swap(i, j);
                }
                nodes.truncate(size);
                let best = crate::reference::min_spanning_tree_by_enumeration(&t, &nodes);
                let got = t.mst_weight(&nodes);
                assert!((got - best).abs() <= 1e-9, "mst {got} vs enumeration {best}");
            }
        }
    }
}
