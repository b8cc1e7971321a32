//! Planning domain for path-planning with mandatory pass-by nodes.
//!
//! A problem instance `(start, dest, M)` asks for a minimum-cost walk from
//! `start` to `dest` that visits every node of `M` at least once. The same
//! triple doubles as a search state: moving along an edge into a node removes
//! that node from `M`, and the walk is complete when the current node is
//! `dest` and `M` is empty.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::graph::{HeapCost, ShortestPathTable, WeightedGraph};

/// One planning problem / search state: `(start, dest, M)`.
///
/// The mandatory list is always sorted and deduplicated, so equality and
/// hashing are value-based. [`Instance::new`] additionally normalizes by
/// dropping `start` and `dest` from `M` (membership is only consumed on
/// *arrival* at a node, so a mandatory `start` would force a detour and a
/// mandatory `dest` is redundant — any accepted walk ends by arriving at
/// `dest`). The un-normalized form still arises inside the backward search
/// over [`predecessors`], which is what [`Instance::raw`] is for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Instance {
    start: usize,
    dest: usize,
    mandatory: Vec<usize>,
}

impl Instance {
    /// Normalizing constructor: sorts, deduplicates, and removes `start` and
    /// `dest` from the mandatory set.
    pub fn new(start: usize, dest: usize, mandatory: impl IntoIterator<Item = usize>) -> Self {
        let mut m: Vec<usize> = mandatory
            .into_iter()
            .filter(|&v| v != start && v != dest)
            .collect();
        m.sort_unstable();
        m.dedup();
        Self {
            start,
            dest,
            mandatory: m,
        }
    }

    /// Transition-system constructor: sorts and deduplicates but keeps
    /// `start` inside `M` if present. Produced by [`predecessors`] when the
    /// backward dynamics re-add the departed node.
    pub fn raw(start: usize, dest: usize, mandatory: impl IntoIterator<Item = usize>) -> Self {
        let mut m: Vec<usize> = mandatory.into_iter().collect();
        m.sort_unstable();
        m.dedup();
        Self {
            start,
            dest,
            mandatory: m,
        }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn dest(&self) -> usize {
        self.dest
    }

    pub fn mandatory(&self) -> &[usize] {
        &self.mandatory
    }

    /// True iff the destination is reached and no mandatory nodes remain.
    pub fn is_end_state(&self) -> bool {
        self.start == self.dest && self.mandatory.is_empty()
    }

    /// True iff `start ∉ M` (always true for [`Instance::new`] values).
    pub fn is_normalized(&self) -> bool {
        !self.mandatory.contains(&self.start)
    }

    /// All node indices fit a graph with `n` nodes.
    pub fn is_valid_for(&self, n: usize) -> bool {
        self.start < n && self.dest < n && self.mandatory.iter().all(|&m| m < n)
    }
}

impl fmt::Display for Instance {
    /// Text form `"start dest m1,m2,..."`, with `-` for an empty set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.start, self.dest)?;
        if self.mandatory.is_empty() {
            write!(f, "-")
        } else {
            let joined = self
                .mandatory
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(",");
            write!(f, "{joined}")
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid instance text {text:?}: {msg}")]
pub struct ParseInstanceError {
    pub text: String,
    pub msg: String,
}

impl std::str::FromStr for Instance {
    type Err = ParseInstanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |msg: &str| ParseInstanceError {
            text: s.to_string(),
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = s.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err("expected \"start dest m1,m2,...\""));
        }
        let start = fields[0].parse().map_err(|_| err("bad start node"))?;
        let dest = fields[1].parse().map_err(|_| err("bad destination node"))?;
        let mandatory = if fields[2] == "-" {
            Vec::new()
        } else {
            fields[2]
                .split(',')
                .map(|t| t.parse().map_err(|_| err("bad mandatory node")))
                .collect::<Result<Vec<usize>, _>>()?
        };
        Ok(Instance::raw(start, dest, mandatory))
    }
}

/// Forward transitions: one successor per neighbor `start'` of `s.start`,
/// namely `(start', dest, M \ {start'})` at the cost of the crossed edge.
///
/// # Panics
/// End states have no successors; calling this on one is a contract
/// violation.
pub fn successors(s: &Instance, g: &WeightedGraph) -> Vec<(Instance, f64)> {
    assert!(
        !s.is_end_state(),
        "successors() called on an end state: {s}"
    );
    g.neighbors(s.start)
        .iter()
        .map(|&(next, w)| {
            let m: Vec<usize> = s
                .mandatory
                .iter()
                .copied()
                .filter(|&v| v != next)
                .collect();
            (
                Instance {
                    start: next,
                    dest: s.dest,
                    mandatory: m,
                },
                w,
            )
        })
        .collect()
}

/// Backward transitions. For each neighbor `start'` of `s.start` there are
/// two candidate predecessors:
///
/// * `(start', dest, M)` — included only if `start' ∉ M`;
/// * `(start', dest, M ∪ {start})` — included only if `start ≠ dest`.
///
/// Candidates that are end states are excluded. The second form can place
/// the candidate's own start node inside its mandatory set (see
/// [`Instance::raw`]).
pub fn predecessors(s: &Instance, g: &WeightedGraph) -> Vec<(Instance, f64)> {
    let mut out = Vec::new();
    for &(prev, w) in g.neighbors(s.start) {
        if !s.mandatory.contains(&prev) {
            let cand = Instance {
                start: prev,
                dest: s.dest,
                mandatory: s.mandatory.clone(),
            };
            if !cand.is_end_state() {
                out.push((cand, w));
            }
        }
        if s.start != s.dest {
            let mut m = s.mandatory.clone();
            if let Err(pos) = m.binary_search(&s.start) {
                m.insert(pos, s.start);
            }
            let cand = Instance {
                start: prev,
                dest: s.dest,
                mandatory: m,
            };
            if !cand.is_end_state() {
                out.push((cand, w));
            }
        }
    }
    out
}

/// A solved instance: the walk, its cost, and search effort.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub path: Vec<usize>,
    pub cost: f64,
    pub states_visited: u64,
    pub elapsed: Duration,
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("search timed out after {0:?}")]
    Timeout(Duration),
}

/// State-value estimators for [`forward_astar`]. Must never overestimate the
/// true remaining cost for the search to stay optimal.
pub trait Heuristic {
    fn estimate(&self, node: usize, remaining: &[usize], dest: usize) -> f64;
}

/// The trivial admissible heuristic; turns A* into uniform-cost search.
pub struct ZeroHeuristic;

impl Heuristic for ZeroHeuristic {
    fn estimate(&self, _node: usize, _remaining: &[usize], _dest: usize) -> f64 {
        0.0
    }
}

/// Lower bound from the metric closure: MST over the remaining mandatory
/// nodes, plus the cheapest way in from the current node and out to the
/// destination.
pub struct MstHeuristic<'a> {
    table: &'a ShortestPathTable,
}

impl<'a> MstHeuristic<'a> {
    pub fn new(table: &'a ShortestPathTable) -> Self {
        Self { table }
    }
}

impl Heuristic for MstHeuristic<'_> {
    fn estimate(&self, node: usize, remaining: &[usize], dest: usize) -> f64 {
        mst_bound(node, remaining, dest, self.table)
    }
}

/// [`MstHeuristic`] applied to a whole instance.
pub fn mst_heuristic(s: &Instance, t: &ShortestPathTable) -> f64 {
    mst_bound(s.start, &s.mandatory, s.dest, t)
}

fn mst_bound(node: usize, remaining: &[usize], dest: usize, t: &ShortestPathTable) -> f64 {
    if remaining.is_empty() {
        return t.cost(node, dest);
    }
    let tree = t.mst_weight(remaining);
    let mut enter = f64::INFINITY;
    let mut exit = f64::INFINITY;
    for &m in remaining {
        enter = enter.min(t.cost(node, m));
        exit = exit.min(t.cost(m, dest));
    }
    tree + enter + exit
}

/// Optimal search over the forward dynamics of [`successors`].
///
/// Ties on `f` prefer the larger `g` (deeper states), then insertion order.
/// A state reached again with strictly lower cost is re-opened, so any
/// admissible (not necessarily consistent) heuristic yields optimal results.
/// `states_visited` counts expansions from the OPEN list, the final goal pop
/// included.
pub fn forward_astar(
    s: &Instance,
    g: &WeightedGraph,
    h: &dyn Heuristic,
    timeout: Option<Duration>,
) -> Result<SearchResult, SearchError> {
    assert!(s.is_valid_for(g.node_count()), "instance out of range: {s}");
    let started = Instant::now();
    let dest = s.dest;

    type Key = (usize, Vec<usize>);
    struct Entry {
        g: f64,
        parent: Option<Key>,
        closed: bool,
    }

    let root: Key = (s.start, s.mandatory.clone());
    let mut info: HashMap<Key, Entry> = HashMap::new();
    info.insert(
        root.clone(),
        Entry {
            g: 0.0,
            parent: None,
            closed: false,
        },
    );
    // Ordering: min f, then max g, then first-in. `seq` is unique per push,
    // so the key (which only breaks the final tie) is never compared.
    let mut open: BinaryHeap<Reverse<(HeapCost, Reverse<HeapCost>, u64, Key)>> = BinaryHeap::new();
    let h0 = h.estimate(s.start, &s.mandatory, dest);
    open.push(Reverse((HeapCost(h0), Reverse(HeapCost(0.0)), 0, root)));
    let mut seq = 1u64;
    let mut visited = 0u64;

    while let Some(Reverse((_, Reverse(HeapCost(gpop)), _, key))) = open.pop() {
        {
            let entry = &info[&key];
            if entry.closed || gpop > entry.g {
                continue; // stale heap entry
            }
        }
        if let Some(limit) = timeout {
            let elapsed = started.elapsed();
            if elapsed > limit {
                return Err(SearchError::Timeout(elapsed));
            }
        }
        visited += 1;
        if key.0 == dest && key.1.is_empty() {
            let mut path = Vec::new();
            let mut cur = Some(&key);
            while let Some(k) = cur {
                path.push(k.0);
                cur = info[k].parent.as_ref();
            }
            path.reverse();
            return Ok(SearchResult {
                path,
                cost: gpop,
                states_visited: visited,
                elapsed: started.elapsed(),
            });
        }
        info.get_mut(&key).unwrap().closed = true;
        let (node, remaining) = key;
        for &(next, w) in g.neighbors(node) {
            let mut m: Vec<usize> = remaining.clone();
            if let Ok(pos) = m.binary_search(&next) {
                m.remove(pos);
            }
            let child: Key = (next, m);
            let tentative = gpop + w;
            let better = match info.get(&child) {
                Some(e) => tentative < e.g,
                None => true,
            };
            if better {
                let f = tentative + h.estimate(next, &child.1, dest);
                info.insert(
                    child.clone(),
                    Entry {
                        g: tentative,
                        parent: Some((node, remaining.clone())),
                        closed: false,
                    },
                );
                open.push(Reverse((
                    HeapCost(f),
                    Reverse(HeapCost(tentative)),
                    seq,
                    child,
                )));
                seq += 1;
            }
        }
    }
    unreachable!("connected graphs always admit a solution")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::WeightedGraph;
    use proptest::prelude::*;

    fn path_graph(n: usize) -> WeightedGraph {
        WeightedGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1, 1.0))).unwrap()
    }

    fn inst(start: usize, dest: usize, m: &[usize]) -> Instance {
        Instance::new(start, dest, m.iter().copied())
    }

    #[test]
    fn normalization_strips_endpoints_and_dups() {
        let s = Instance::new(2, 5, [2, 5, 7, 7, 3]);
        assert_eq!(s.mandatory(), &[3, 7]);
        assert!(s.is_normalized());
    }

    #[test]
    fn raw_keeps_start_in_mandatory() {
        let s = Instance::raw(2, 3, [1, 2]);
        assert_eq!(s.mandatory(), &[1, 2]);
        assert!(!s.is_normalized());
    }

    #[test]
    fn end_state_definition() {
        assert!(inst(3, 3, &[]).is_end_state());
        assert!(!Instance::raw(3, 3, [1]).is_end_state());
        assert!(!inst(0, 3, &[]).is_end_state());
    }

    #[test]
    fn display_and_parse_forms() {
        assert_eq!(inst(0, 3, &[2, 1]).to_string(), "0 3 1,2");
        assert_eq!(inst(4, 4, &[]).to_string(), "4 4 -");
        assert_eq!("0 3 1,2".parse::<Instance>().unwrap(), inst(0, 3, &[1, 2]));
        assert_eq!("4 4 -".parse::<Instance>().unwrap(), inst(4, 4, &[]));
        assert!("4 4".parse::<Instance>().is_err());
        assert!("a 4 -".parse::<Instance>().is_err());
    }

    #[test]
    fn successor_rule_on_path_graph() {
        let g = path_graph(4);
        assert_eq!(
            successors(&inst(0, 3, &[1, 2]), &g),
            vec![(Instance::raw(1, 3, [2]), 1.0)]
        );
        assert_eq!(
            successors(&inst(1, 3, &[2]), &g),
            vec![
                (Instance::raw(0, 3, [2]), 1.0),
                (Instance::raw(2, 3, []), 1.0)
            ]
        );
        assert_eq!(
            successors(&inst(2, 3, &[]), &g),
            vec![
                (Instance::raw(1, 3, []), 1.0),
                (Instance::raw(3, 3, []), 1.0)
            ]
        );
    }

    #[test]
    #[should_panic(expected = "end state")]
    fn successors_reject_end_state() {
        successors(&inst(3, 3, &[]), &path_graph(4));
    }

    #[test]
    fn predecessor_rules_on_path_graph() {
        let g = path_graph(4);
        // The (2,3,{2}) candidate is dropped: its start node 2 is in M.
        assert_eq!(
            predecessors(&inst(1, 3, &[2]), &g),
            vec![
                (Instance::raw(0, 3, [2]), 1.0),
                (Instance::raw(0, 3, [1, 2]), 1.0),
                (Instance::raw(2, 3, [1, 2]), 1.0),
            ]
        );
        // start = dest suppresses the M ∪ {start} variant.
        assert_eq!(
            predecessors(&inst(3, 3, &[]), &g),
            vec![(Instance::raw(2, 3, []), 1.0)]
        );
    }

    #[test]
    fn predecessors_never_yield_end_states() {
        let g = path_graph(4);
        for s in all_normalized_instances(4, 3) {
            for (p, _) in predecessors(&s, &g) {
                assert!(!p.is_end_state());
            }
        }
    }

    fn all_normalized_instances(n: usize, max_m: usize) -> Vec<Instance> {
        let mut out = Vec::new();
        for start in 0..n {
            for dest in 0..n {
                for mask in 0u32..(1 << n) {
                    let m: Vec<usize> = (0..n).filter(|&v| mask & (1 << v) != 0).collect();
                    if m.len() > max_m || m.contains(&start) || m.contains(&dest) {
                        continue;
                    }
                    out.push(inst(start, dest, &m));
                }
            }
        }
        out
    }

    #[test]
    fn transition_duality_exhaustive() {
        // Over every normalized state of a 5-node graph with |M| ≤ 3:
        // backward edges invert forward edges with equal cost, and vice versa.
        let g = WeightedGraph::random_connected(5, 2.5, 77);
        for s in all_normalized_instances(5, 3) {
            for (p, c) in predecessors(&s, &g) {
                let succ = successors(&p, &g);
                assert!(
                    succ.iter().any(|(q, cq)| q == &s && cq == &c),
                    "pred {p} of {s} lacks the forward edge back"
                );
            }
            if !s.is_end_state() {
                for (q, c) in successors(&s, &g) {
                    let preds = predecessors(&q, &g);
                    assert!(
                        preds.iter().any(|(p, cp)| p == &s && cp == &c),
                        "succ {q} of {s} lacks the backward edge back"
                    );
                }
            }
        }
    }

    #[test]
    fn astar_unconstrained_shortest_path() {
        let g = path_graph(4);
        let r = forward_astar(&inst(0, 3, &[]), &g, &ZeroHeuristic, None).unwrap();
        assert_eq!(r.path, vec![0, 1, 2, 3]);
        assert_eq!(r.cost, 3.0);
        assert_eq!(r.states_visited, 4);
    }

    #[test]
    fn astar_with_mandatory_detour() {
        let g = path_graph(4);
        let t = ShortestPathTable::compute(&g);
        let r = forward_astar(&inst(0, 3, &[1, 2]), &g, &ZeroHeuristic, None).unwrap();
        assert_eq!(r.cost, 3.0);
        let m = MstHeuristic::new(&t);
        let r = forward_astar(&inst(1, 3, &[0]), &g, &m, None).unwrap();
        assert_eq!(r.cost, 4.0);
        assert_eq!(r.path, vec![1, 0, 1, 2, 3]);
    }

    #[test]
    fn astar_immediate_goal() {
        let g = path_graph(4);
        let r = forward_astar(&inst(2, 2, &[]), &g, &ZeroHeuristic, None).unwrap();
        assert_eq!(r.path, vec![2]);
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.states_visited, 1);
    }

    #[test]
    fn astar_timeout_fires() {
        let g = WeightedGraph::random_connected(18, 3.0, 3);
        let s = Instance::new(0, 17, 1..13);
        let err = forward_astar(&s, &g, &ZeroHeuristic, Some(Duration::ZERO)).unwrap_err();
        assert!(matches!(err, SearchError::Timeout(_)));
    }

    #[test]
    fn mst_heuristic_examples() {
        let t = ShortestPathTable::compute(&path_graph(4));
        assert_eq!(mst_heuristic(&inst(0, 3, &[]), &t), 3.0);
        assert_eq!(mst_heuristic(&inst(0, 3, &[1, 2]), &t), 3.0);
        assert_eq!(mst_heuristic(&inst(0, 3, &[2]), &t), 3.0);
    }

    #[test]
    fn mst_heuristic_admissible_on_random_instances() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for seed in 0..10 {
            let g = WeightedGraph::random_connected(9, 3.0, 400 + seed);
            let t = ShortestPathTable::compute(&g);
            for _ in 0..5 {
                let mut nodes: Vec<usize> = (0..9).collect();
                nodes.shuffle(&mut rng);
                let k = rng.gen_range(0..=6);
                let s = Instance::new(nodes[0], nodes[1], nodes[2..2 + k].iter().copied());
                let opt = crate::reference::optimal_cost_by_order_enumeration(&s, &t);
                assert!(
                    mst_heuristic(&s, &t) <= opt + 1e-9,
                    "heuristic exceeds optimum on {s}"
                );
            }
        }
    }

    #[test]
    fn astar_heuristics_agree_and_results_validate() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for seed in 0..8 {
            let g = WeightedGraph::random_connected(8, 2.8, 500 + seed);
            let t = ShortestPathTable::compute(&g);
            let m = MstHeuristic::new(&t);
            for _ in 0..6 {
                let mut nodes: Vec<usize> = (0..8).collect();
                nodes.shuffle(&mut rng);
                let k = rng.gen_range(0..=4);
                let s = Instance::new(nodes[0], nodes[1], nodes[2..2 + k].iter().copied());
                let a = forward_astar(&s, &g, &ZeroHeuristic, None).unwrap();
                let b = forward_astar(&s, &g, &m, None).unwrap();
                assert_eq!(a.cost, b.cost, "heuristics disagree on {s}");
                assert!(b.states_visited <= a.states_visited);
                crate::reference::validate_search_result(&s, &g, &a).unwrap();
                crate::reference::validate_search_result(&s, &g, &b).unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn instance_text_round_trip(start in 0usize..50, dest in 0usize..50,
                                    m in proptest::collection::vec(0usize..50, 0..8)) {
            let s = Instance::new(start, dest, m);
            let back: Instance = s.to_string().parse().unwrap();
            prop_assert_eq!(s, back);
        }
    }
}
