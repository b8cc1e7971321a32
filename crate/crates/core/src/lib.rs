//! Solvers for optimal path planning with mandatory pass-by nodes on weighted
//! connected graphs.
//!
//! The crate bundles four exact solvers over the same problem — an instance is
//! a `(start, dest, mandatory)` triple and a solution is a minimum-cost walk
//! from `start` to `dest` that visits every mandatory node at least once:
//!
//! * [`bnb::dp_solve`] — Held-Karp subset dynamic programming,
//! * [`bnb::dfs_branch_and_bound`] — depth-first branch and bound over the
//!   mandatory search tree with a half-sum lower bound,
//! * [`planning::forward_astar`] — A* on the planning state space, with a
//!   minimum-spanning-tree heuristic,
//! * branch and bound seeded with an upper bound probed from a graph
//!   convolutional network ([`gcn`]).
//!
//! [`datagen`] produces the self-supervised training set for the network by
//! running a backwards uniform-cost search from every termination state, and
//! [`bench`] drives the whole pipeline into CSV benchmark reports.
//!
//! With the `parallel` feature (default) the data-parallel inner loops
//! (all-pairs shortest paths, per-terminal data generation, benchmark solving,
//! matrix products) run on rayon; without it everything falls back to
//! sequential code with identical, bit-for-bit deterministic results.

pub mod bench;
pub mod bnb;
pub mod datagen;
pub mod gcn;
pub mod graph;
pub mod linalg;
pub mod planning;
pub mod reference;

mod parallel;

pub use graph::{ShortestPathTable, WeightedGraph};
pub use planning::Instance;
