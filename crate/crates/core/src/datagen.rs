//! Self-supervised training-set generation.
//!
//! For every termination state `Fᵢ = (i, i, ∅)` a backwards uniform-cost
//! search expands predecessor states, maintaining for each reached state `s`
//! the cost `g(s)` of the best known continuation and the first mandatory
//! node `d(s)` visited along it. When a state is settled (popped with final
//! `g`), the pair `⟨s, d(s)⟩` becomes a training example: the label is the
//! mandatory node an optimal solution visits first.
//!
//! Emission is restricted to states whose start node is outside their own
//! mandatory set. The backward transition rules do generate the other kind
//! (see [`Instance::raw`]) and those states are expanded normally, but they
//! are unreachable under the forward dynamics and the backward rules can
//! overestimate their cost, so they carry no trustworthy label.

use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{HeapCost, WeightedGraph};
use crate::parallel;
use crate::planning::{predecessors, Instance};

/// Nominal expansion rate used to convert a wall-clock budget into a
/// deterministic expansion count. Budgets are accounted in these virtual
/// units — never against a real clock — so the same inputs produce the same
/// dataset on any machine. The rate is calibrated to a commodity core so a
/// ten-minute budget yields a training set whose mandatory-set sizes reach
/// the depths the benchmark instances use.
pub const BUDGET_POPS_PER_SECOND: f64 = 2048.0;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One supervised example: in `state`, visit `label` first among the
/// mandatory nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub state: Instance,
    /// First mandatory node on an optimal solution of `state`.
    pub label: usize,
    /// Optimal solving cost `g(state)`; known at generation time, not stored
    /// in dataset files.
    pub cost: Option<f64>,
}

/// A labeled dataset bound to one graph.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph_id: String,
    pub pairs: Vec<TrainingPair>,
    /// Provenance seed recorded in the file header (generation itself is
    /// deterministic; shuffling and downstream training consume seeds).
    pub seed: u64,
    /// Requested generation budget (virtual time, see
    /// [`BUDGET_POPS_PER_SECOND`]). Zero for parsed datasets.
    pub budget: Duration,
    /// Pairs contributed by each termination state's run. Empty for parsed
    /// datasets.
    pub terminal_pair_counts: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Renders the line-oriented text format: a `#graph <id> seed <seed>`
    /// header, then one `"start dest m1,m2,... label"` line per pair.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#graph {} seed {}", self.graph_id, self.seed);
        for p in &self.pairs {
            let _ = writeln!(out, "{} {}", p.state, p.label);
        }
        out
    }

    /// Parses the format written by [`Dataset::to_text`].
    pub fn parse(text: &str) -> Result<Self, DatagenError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatagenError::Parse {
            line: 1,
            msg: "empty dataset file".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (graph_id, seed) = match fields.as_slice() {
            ["#graph", id, "seed", seed] => (
                id.to_string(),
                seed.parse().map_err(|_| DatagenError::Parse {
                    line: 1,
                    msg: format!("bad seed {seed:?}"),
                })?,
            ),
            _ => {
                return Err(DatagenError::Parse {
                    line: 1,
                    msg: "expected header \"#graph <id> seed <seed>\"".into(),
                })
            }
        };
        let mut pairs = Vec::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (state_text, label_text) =
                trimmed.rsplit_once(' ').ok_or(DatagenError::Parse {
                    line,
                    msg: "expected \"start dest m1,m2,... label\"".into(),
                })?;
            let state: Instance = state_text.parse().map_err(|e| DatagenError::Parse {
                line,
                msg: format!("{e}"),
            })?;
            let label = label_text.parse().map_err(|_| DatagenError::Parse {
                line,
                msg: format!("bad label {label_text:?}"),
            })?;
            pairs.push(TrainingPair {
                state,
                label,
                cost: None,
            });
        }
        Ok(Self {
            graph_id,
            pairs,
            seed,
            budget: Duration::ZERO,
            terminal_pair_counts: Vec::new(),
        })
    }
}

/// Generates a dataset by backwards uniform-cost search from every
/// termination state, runs executing in parallel when enabled.
///
/// `budget` is split evenly across the `|𝒱|` runs and accounted in virtual
/// expansion units ([`BUDGET_POPS_PER_SECOND`]). `max_mandatory` bounds the
/// growth of mandatory sets: predecessors that would exceed it are not
/// enqueued.
pub fn backwards_astar_generate(
    g: &WeightedGraph,
    graph_id: &str,
    budget: Duration,
    max_mandatory: usize,
    seed: u64,
) -> Dataset {
    assemble(
        g,
        graph_id,
        budget,
        seed,
        parallel::map_indexed(g.node_count(), |i| {
            run_from_terminal(g, i, per_terminal_pops(g, budget), max_mandatory)
        }),
    )
}

/// Sequential twin of [`backwards_astar_generate`]; same output, one thread.
pub fn backwards_astar_generate_seq(
    g: &WeightedGraph,
    graph_id: &str,
    budget: Duration,
    max_mandatory: usize,
    seed: u64,
) -> Dataset {
    assemble(
        g,
        graph_id,
        budget,
        seed,
        parallel::map_indexed_seq(g.node_count(), |i| {
            run_from_terminal(g, i, per_terminal_pops(g, budget), max_mandatory)
        }),
    )
}

fn per_terminal_pops(g: &WeightedGraph, budget: Duration) -> u64 {
    (budget.as_secs_f64() * BUDGET_POPS_PER_SECOND / g.node_count() as f64).ceil() as u64
}

fn assemble(
    g: &WeightedGraph,
    graph_id: &str,
    budget: Duration,
    seed: u64,
    per_terminal: Vec<Vec<TrainingPair>>,
) -> Dataset {
    let terminal_pair_counts: Vec<u64> = per_terminal.iter().map(|p| p.len() as u64).collect();
    let pairs: Vec<TrainingPair> = per_terminal.into_iter().flatten().collect();
    if pairs.is_empty() {
        log::warn!(
            "data generation produced no pairs on {graph_id} \
             (budget {budget:?} over {} terminals)",
            g.node_count()
        );
    }
    Dataset {
        graph_id: graph_id.to_string(),
        pairs,
        seed,
        budget,
        terminal_pair_counts,
    }
}

fn run_from_terminal(
    g: &WeightedGraph,
    terminal: usize,
    pop_budget: u64,
    max_mandatory: usize,
) -> Vec<TrainingPair> {
    struct Rec {
        g: f64,
        first_mandatory: Option<usize>,
        settled: bool,
    }
    type Key = (usize, Vec<usize>);

    let mut info: HashMap<Key, Rec> = HashMap::new();
    // Pop order (g, start, |M|, M): the set-size component makes a state's
    // subset variants settle before its superset variants at equal cost,
    // which keeps label propagation exact (see module docs).
    let mut open: BinaryHeap<std::cmp::Reverse<(HeapCost, usize, usize, Vec<usize>)>> =
        BinaryHeap::new();
    info.insert(
        (terminal, Vec::new()),
        Rec {
            g: 0.0,
            first_mandatory: None,
            settled: false,
        },
    );
    open.push(std::cmp::Reverse((
        HeapCost(0.0),
        terminal,
        0,
        Vec::new(),
    )));

    let mut out = Vec::new();
    let mut pops = 0u64;
    while pops < pop_budget {
        let Some(std::cmp::Reverse((HeapCost(gpop), start, _, mand))) = open.pop() else {
            break;
        };
        let (g_final, first_mandatory) = {
            let rec = info.get_mut(&(start, mand.clone())).unwrap();
            if rec.settled || gpop > rec.g {
                continue; // superseded heap entry
            }
            debug_assert_eq!(gpop, rec.g);
            rec.settled = true;
            (rec.g, rec.first_mandatory)
        };
        pops += 1;
        if !mand.is_empty() && !mand.contains(&start) {
            out.push(TrainingPair {
                state: Instance::raw(start, terminal, mand.iter().copied()),
                label: first_mandatory.expect("nonempty mandatory set implies a label"),
                cost: Some(g_final),
            });
        }
        let state = Instance::raw(start, terminal, mand.iter().copied());
        for (pred, w) in predecessors(&state, g) {
            if pred.mandatory().len() > max_mandatory {
                continue;
            }
            let cand = g_final + w;
            let label = if pred.mandatory() == mand.as_slice() {
                first_mandatory
            } else {
                Some(start)
            };
            let key: Key = (pred.start(), pred.mandatory().to_vec());
            match info.entry(key) {
                Entry::Occupied(mut e) => {
                    let rec = e.get_mut();
                    assert!(
                        !(rec.settled && cand < rec.g),
                        "settled state relaxed: pop order is not cost-monotone"
                    );
                    if !rec.settled && cand < rec.g {
                        rec.g = cand;
                        rec.first_mandatory = label;
                        open.push(std::cmp::Reverse((
                            HeapCost(cand),
                            pred.start(),
                            pred.mandatory().len(),
                            pred.mandatory().to_vec(),
                        )));
                    }
                }
                Entry::Vacant(e) => {
                    e.insert(Rec {
                        g: cand,
                        first_mandatory: label,
                        settled: false,
                    });
                    open.push(std::cmp::Reverse((
                        HeapCost(cand),
                        pred.start(),
                        pred.mandatory().len(),
                        pred.mandatory().to_vec(),
                    )));
                }
            }
        }
    }
    out
}

/// Deterministically shuffles and partitions a dataset; the first part gets
/// `round(train_fraction · len)` pairs.
pub fn shuffle_split(d: &Dataset, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train fraction must lie strictly between 0 and 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = d.pairs.clone();
    shuffled.shuffle(&mut rng);
    let cut = (shuffled.len() as f64 * train_fraction).round() as usize;
    let test = shuffled.split_off(cut);
    let part = |pairs: Vec<TrainingPair>| Dataset {
        graph_id: d.graph_id.clone(),
        pairs,
        seed,
        budget: d.budget,
        terminal_pair_counts: Vec::new(),
    };
    (part(shuffled), part(test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::{forward_astar, ZeroHeuristic};

    fn path_graph(n: usize) -> WeightedGraph {
        WeightedGraph::from_edges(n, (0..n - 1).map(|i| (i, i + 1, 1.0))).unwrap()
    }

    fn generous(g: &WeightedGraph) -> Dataset {
        backwards_astar_generate(g, "test", Duration::from_secs(60), 4, 0)
    }

    #[test]
    fn chain_dataset_contains_expected_pair() {
        let g = path_graph(4);
        let d = generous(&g);
        let hit = d
            .pairs
            .iter()
            .find(|p| p.state == Instance::new(0, 3, [1, 2]))
            .expect("state (0,3,{1,2}) should be generated");
        assert_eq!(hit.label, 1);
        assert_eq!(hit.cost, Some(3.0));
    }

    #[test]
    fn pairs_always_have_mandatory_nodes_and_valid_labels() {
        let g = WeightedGraph::random_connected(6, 2.5, 42);
        let d = generous(&g);
        assert!(!d.is_empty());
        for p in &d.pairs {
            assert!(!p.state.mandatory().is_empty());
            assert!(p.state.mandatory().contains(&p.label));
            assert!(p.state.is_normalized());
            assert_ne!(p.label, p.state.start());
        }
    }

    #[test]
    fn costs_match_forward_search_even_on_skewed_weights() {
        // The triangle detour (2 via node 1) is far cheaper than the direct
        // 0–2 edge; backward costs must still equal forward optima.
        let skewed = WeightedGraph::from_edges(
            4,
            [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 100.0), (0, 3, 10.0), (0, 2, 1000.0)],
        )
        .unwrap();
        for g in [path_graph(4), skewed, WeightedGraph::random_connected(6, 2.8, 7)] {
            let d = generous(&g);
            for p in &d.pairs {
                let r = forward_astar(&p.state, &g, &ZeroHeuristic, None).unwrap();
                assert_eq!(
                    Some(r.cost),
                    p.cost,
                    "backward cost mismatch on {}",
                    p.state
                );
            }
        }
    }

    #[test]
    fn labels_match_an_optimal_first_mandatory() {
        for seed in [3, 9] {
            let g = WeightedGraph::random_connected(6, 2.7, seed);
            let t = crate::graph::ShortestPathTable::compute(&g);
            let d = generous(&g);
            for p in &d.pairs {
                let valid = crate::reference::optimal_first_mandatory_nodes(&p.state, &g, &t);
                assert!(
                    valid.contains(&p.label),
                    "label {} of {} not optimal (valid: {valid:?})",
                    p.label,
                    p.state
                );
            }
        }
    }

    #[test]
    fn mandatory_size_buckets_all_populated() {
        let g = WeightedGraph::random_connected(10, 3.0, 11);
        let d = generous(&g);
        for size in 1..=4usize {
            assert!(
                d.pairs.iter().any(|p| p.state.mandatory().len() == size),
                "no pairs with {size} mandatory nodes"
            );
        }
    }

    #[test]
    fn cap_limits_mandatory_growth() {
        let g = WeightedGraph::random_connected(10, 3.0, 11);
        let d = backwards_astar_generate(&g, "t", Duration::from_secs(60), 2, 0);
        assert!(d.pairs.iter().all(|p| p.state.mandatory().len() <= 2));
    }

    #[test]
    fn zero_budget_yields_empty_dataset() {
        let d = backwards_astar_generate(&path_graph(4), "t", Duration::ZERO, 4, 0);
        assert!(d.is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_thread_count_independent() {
        let g = WeightedGraph::random_connected(9, 3.0, 5);
        let a = backwards_astar_generate(&g, "t", Duration::from_secs(10), 4, 1);
        let b = backwards_astar_generate(&g, "t", Duration::from_secs(10), 4, 1);
        let c = backwards_astar_generate_seq(&g, "t", Duration::from_secs(10), 4, 1);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.pairs, c.pairs);
        assert_eq!(a.terminal_pair_counts, c.terminal_pair_counts);
    }

    #[test]
    fn split_partitions_and_preserves_pairs() {
        let g = WeightedGraph::random_connected(6, 2.8, 2);
        let mut d = generous(&g);
        d.pairs.truncate(10);
        let (train, test) = shuffle_split(&d, 0.8, 99);
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
        let again = shuffle_split(&d, 0.8, 99);
        assert_eq!(train.pairs, again.0.pairs);
        assert_eq!(test.pairs, again.1.pairs);
        let mut union: Vec<_> = train.pairs.iter().chain(&test.pairs).cloned().collect();
        let mut original = d.pairs.clone();
        union.sort_by(|a, b| (&a.state, a.label).cmp(&(&b.state, b.label)));
        original.sort_by(|a, b| (&a.state, a.label).cmp(&(&b.state, b.label)));
        assert_eq!(union, original);
    }

    #[test]
    fn text_round_trip_preserves_states_and_labels() {
        let g = WeightedGraph::random_connected(6, 2.8, 4);
        let d = generous(&g);
        let parsed = Dataset::parse(&d.to_text()).unwrap();
        assert_eq!(parsed.graph_id, d.graph_id);
        assert_eq!(parsed.seed, d.seed);
        assert_eq!(parsed.len(), d.len());
        for (a, b) in d.pairs.iter().zip(&parsed.pairs) {
            assert_eq!(a.state, b.state);
            assert_eq!(a.label, b.label);
            assert_eq!(b.cost, None);
        }
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        assert!(Dataset::parse("").is_err());
        assert!(Dataset::parse("#graph g seed x\n").is_err());
        let err = Dataset::parse("#graph g seed 1\n0 3 1,2\n").unwrap_err();
        let DatagenError::Parse { line, .. } = err;
        assert_eq!(line, 2);
    }
}
