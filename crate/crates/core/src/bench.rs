//! Benchmark harness: instance-set generation, solver comparison runs, and
//! CSV emission.
//!
//! Instance sets follow the decimation scheme: rank every ordered
//! source–destination pair by shortest-path cost (longest first, ties by
//! `(i, j)`), keep the top `⌈(1 − ratio)·pairs⌉`, and draw uniform mandatory
//! sets of each requested cardinality for every kept pair. Each selected
//! solver runs on every instance under a per-instance timeout; any cost
//! disagreement between solvers that finished aborts the run, so every
//! benchmark doubles as an optimality cross-check.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bnb::{self, BnbError, DEFAULT_DP_CAP};
use crate::gcn::{normalized_adjacency, GcnError, GcnModel, NormalizedAdjacency};
use crate::graph::{GraphError, ShortestPathTable, WeightedGraph};
use crate::parallel;
use crate::planning::{forward_astar, Instance, MstHeuristic, SearchError};

/// Exact header of the per-instance CSV.
pub const CSV_HEADER: &str = "graph,solver,start,dest,mandatory_count,cost,visits,elapsed_us,timeout";
/// Exact header of the aggregate CSV.
pub const AGGREGATE_CSV_HEADER: &str =
    "solver,mandatory_count,instances,completed,timeouts,mean_cost,mean_visits,mean_elapsed_us";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error("solvers disagree on {instance}: {detail}")]
    Disagreement { instance: Instance, detail: String },
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("model: {0}")]
    Model(#[from] GcnError),
    #[error("the gcn-seeded solver requires a model file")]
    MissingModel,
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Where the benchmark graph comes from.
#[derive(Debug, Clone)]
pub enum GraphSource {
    File(PathBuf),
    Generated { n: usize, avg_degree: f64, seed: u64 },
}

impl GraphSource {
    fn graph_id(&self) -> String {
        match self {
            GraphSource::File(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "graph".to_string()),
            GraphSource::Generated { n, seed, .. } => format!("g{n}s{seed}"),
        }
    }

    fn load(&self) -> Result<WeightedGraph, BenchError> {
        Ok(match self {
            GraphSource::File(p) => WeightedGraph::parse(&std::fs::read_to_string(p)?)?,
            GraphSource::Generated { n, avg_degree, seed } => {
                WeightedGraph::random_connected(*n, *avg_degree, *seed)
            }
        })
    }
}

/// The four comparable solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SolverKind {
    /// Held–Karp subset dynamic programming over the metric closure.
    Dp,
    /// Depth-first branch and bound with the π lower bound.
    Bnb,
    /// Branch and bound seeded with the network's probing upper bound.
    BnbGcn,
    /// Forward A* over planning states with the MST heuristic.
    AstarMst,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Dp,
        SolverKind::Bnb,
        SolverKind::BnbGcn,
        SolverKind::AstarMst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dp => "dp",
            SolverKind::Bnb => "bnb",
            SolverKind::BnbGcn => "bnb_gcn",
            SolverKind::AstarMst => "astar_mst",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dp" => Ok(SolverKind::Dp),
            "bnb" => Ok(SolverKind::Bnb),
            "bnb_gcn" => Ok(SolverKind::BnbGcn),
            "astar_mst" => Ok(SolverKind::AstarMst),
            other => Err(format!(
                "unknown solver {other:?} (expected dp, bnb, bnb_gcn or astar_mst)"
            )),
        }
    }
}

/// Benchmark run parameters.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub graph: GraphSource,
    /// Fraction of ordered source–destination pairs discarded (shortest
    /// first). `0.8` keeps the longest 20%.
    pub decimation_ratio: f64,
    pub mandatory_counts: Vec<usize>,
    pub instances_per_pair_per_count: usize,
    pub solvers: Vec<SolverKind>,
    pub timeout: Option<Duration>,
    /// Path of the per-instance CSV; the aggregate CSV lands next to it.
    pub out: Option<PathBuf>,
    /// Model file for [`SolverKind::BnbGcn`].
    pub model: Option<PathBuf>,
    pub seed: u64,
    /// With timing off, `elapsed_us` is written as 0, which makes benchmark
    /// CSVs byte-identical across runs with equal seeds.
    pub measure_time: bool,
}

impl BenchmarkConfig {
    pub fn new(graph: GraphSource) -> Self {
        Self {
            graph,
            decimation_ratio: 0.8,
            mandatory_counts: (5..=12).collect(),
            instances_per_pair_per_count: 1,
            solvers: SolverKind::ALL.to_vec(),
            timeout: Some(Duration::from_secs(300)),
            out: None,
            model: None,
            seed: 0,
            measure_time: true,
        }
    }

    /// Checks the parameter ranges against a concrete graph size.
    pub fn validate(&self, n: usize) -> Result<(), BenchError> {
        if !(0.0..1.0).contains(&self.decimation_ratio) {
            return Err(BenchError::InvalidConfig(format!(
                "decimation ratio {} outside [0, 1)",
                self.decimation_ratio
            )));
        }
        if self.mandatory_counts.is_empty() {
            return Err(BenchError::InvalidConfig(
                "mandatory_counts must not be empty".into(),
            ));
        }
        if let Some(&bad) = self.mandatory_counts.iter().find(|&&c| c + 1 >= n) {
            return Err(BenchError::InvalidConfig(format!(
                "mandatory count {bad} infeasible on a graph with {n} nodes"
            )));
        }
        Ok(())
    }
}

/// One solver's outcome on one instance.
#[derive(Debug, Clone)]
pub struct SolverRow {
    pub solver: SolverKind,
    /// `None` on timeout.
    pub cost: Option<f64>,
    pub visits: u64,
    pub elapsed: Duration,
    pub timed_out: bool,
}

/// All solver outcomes for one instance.
#[derive(Debug, Clone)]
pub struct InstanceResult {
    pub instance: Instance,
    pub rows: Vec<SolverRow>,
}

/// Per-(solver, |M|) aggregate over instances that finished; timeouts are
/// counted separately and excluded from the means (means are 0 when nothing
/// completed).
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub solver: SolverKind,
    pub mandatory_count: usize,
    pub instances: usize,
    pub completed: usize,
    pub timeouts: usize,
    pub mean_cost: f64,
    pub mean_visits: f64,
    pub mean_elapsed_us: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub graph_id: String,
    pub results: Vec<InstanceResult>,
    pub aggregates: Vec<Aggregate>,
}

/// Decimates ordered terminal pairs by shortest-path cost and draws seeded
/// uniform mandatory sets for every kept pair and cardinality.
pub fn generate_instances(
    g: &WeightedGraph,
    t: &ShortestPathTable,
    cfg: &BenchmarkConfig,
) -> Result<Vec<Instance>, BenchError> {
    let n = g.node_count();
    cfg.validate(n)?;
    let mut pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    pairs.sort_by(|a, b| {
        t.cost(b.0, b.1)
            .total_cmp(&t.cost(a.0, a.1))
            .then(a.cmp(b))
    });
    let keep = ((1.0 - cfg.decimation_ratio) * pairs.len() as f64).ceil() as usize;
    pairs.truncate(keep);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    for &(start, dest) in &pairs {
        let pool: Vec<usize> = (0..n).filter(|&v| v != start && v != dest).collect();
        for &count in &cfg.mandatory_counts {
            for _ in 0..cfg.instances_per_pair_per_count {
                let mut pick = pool.clone();
                for k in 0..count {
                    let j = rng.gen_range(k..pick.len());
                    pick.swap(k, j);
                }
                out.push(Instance::new(start, dest, pick[..count].iter().copied()));
            }
        }
    }
    Ok(out)
}

fn solve_one(
    solver: SolverKind,
    s: &Instance,
    g: &WeightedGraph,
    t: &ShortestPathTable,
    model: Option<&GcnModel>,
    adj: Option<&NormalizedAdjacency>,
    timeout: Option<Duration>,
    measure_time: bool,
) -> Result<SolverRow, BenchError> {
    let started = measure_time.then(Instant::now);
    let outcome: Result<(f64, u64), BenchError> = match solver {
        SolverKind::Dp => match bnb::dp_solve(s, t, DEFAULT_DP_CAP, timeout) {
            Ok(r) => Ok((r.cost, r.state_visits)),
            Err(BnbError::Timeout(_)) => Err(BenchError::Solver(String::new())),
            Err(e) => return Err(BenchError::Solver(e.to_string())),
        },
        SolverKind::Bnb => match bnb::dfs_branch_and_bound(s, t, None, timeout) {
            Ok(r) => Ok((r.cost, r.stats.node_visits)),
            Err(BnbError::Timeout(_)) => Err(BenchError::Solver(String::new())),
            Err(e) => return Err(BenchError::Solver(e.to_string())),
        },
        SolverKind::BnbGcn => {
            let model = model.ok_or(BenchError::MissingModel)?;
            let adj = adj.expect("adjacency computed whenever a model is present");
            let (_, probe_cost, order) = model.probe_upper_bound(s, t, adj);
            match bnb::dfs_branch_and_bound(s, t, Some((probe_cost, order)), timeout) {
                Ok(r) => Ok((r.cost, r.stats.node_visits)),
                Err(BnbError::Timeout(_)) => Err(BenchError::Solver(String::new())),
                Err(e) => return Err(BenchError::Solver(e.to_string())),
            }
        }
        SolverKind::AstarMst => {
            match forward_astar(s, g, &MstHeuristic::new(t), timeout) {
                Ok(r) => Ok((r.cost, r.states_visited)),
                Err(SearchError::Timeout(_)) => Err(BenchError::Solver(String::new())),
            }
        }
    };
    let elapsed = started.map(|b| b.elapsed()).unwrap_or(Duration::ZERO);
    Ok(match outcome {
        Ok((cost, visits)) => SolverRow {
            solver,
            cost: Some(cost),
            visits,
            elapsed,
            timed_out: false,
        },
        Err(_) => SolverRow {
            solver,
            cost: None,
            visits: 0,
            elapsed,
            timed_out: true,
        },
    })
}

/// Enforces the embedded optimality cross-check: all finishing solvers must
/// report one cost per instance (1e-9 relative tolerance).
pub fn check_agreement(instance: &Instance, rows: &[SolverRow]) -> Result<(), BenchError> {
    let finished: Vec<&SolverRow> = rows.iter().filter(|r| r.cost.is_some()).collect();
    let Some(first) = finished.first() else {
        return Ok(());
    };
    let reference = first.cost.unwrap();
    let tol = 1e-9 * reference.abs().max(1.0);
    if finished
        .iter()
        .any(|r| (r.cost.unwrap() - reference).abs() > tol)
    {
        let detail = finished
            .iter()
            .map(|r| format!("{}={}", r.solver, r.cost.unwrap()))
            .collect::<Vec<_>>()
            .join(" ");
        return Err(BenchError::Disagreement {
            instance: instance.clone(),
            detail,
        });
    }
    Ok(())
}

fn aggregate(results: &[InstanceResult], solvers: &[SolverKind]) -> Vec<Aggregate> {
    let mut counts: Vec<usize> = results
        .iter()
        .map(|r| r.instance.mandatory().len())
        .collect();
    counts.sort_unstable();
    counts.dedup();
    let mut out = Vec::new();
    for &solver in solvers {
        for &count in &counts {
            let rows: Vec<&SolverRow> = results
                .iter()
                .filter(|r| r.instance.mandatory().len() == count)
                .flat_map(|r| r.rows.iter().filter(|row| row.solver == solver))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let completed: Vec<&&SolverRow> = rows.iter().filter(|r| !r.timed_out).collect();
            let denom = completed.len().max(1) as f64;
            out.push(Aggregate {
                solver,
                mandatory_count: count,
                instances: rows.len(),
                completed: completed.len(),
                timeouts: rows.len() - completed.len(),
                mean_cost: completed.iter().map(|r| r.cost.unwrap()).sum::<f64>() / denom,
                mean_visits: completed.iter().map(|r| r.visits as f64).sum::<f64>() / denom,
                mean_elapsed_us: completed
                    .iter()
                    .map(|r| r.elapsed.as_micros() as f64)
                    .sum::<f64>()
                    / denom,
            });
        }
    }
    out
}

/// Runs the selected solvers on prepared instances. Instances are processed
/// in parallel; the report is assembled in instance order.
pub fn run_on_instances(
    g: &WeightedGraph,
    t: &ShortestPathTable,
    graph_id: &str,
    instances: &[Instance],
    model: Option<&GcnModel>,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport, BenchError> {
    if cfg.solvers.contains(&SolverKind::BnbGcn) && model.is_none() {
        return Err(BenchError::MissingModel);
    }
    let adj = model.map(|_| normalized_adjacency(g));
    let outcomes = parallel::map_indexed(instances.len(), |i| {
        let s = &instances[i];
        let rows: Result<Vec<SolverRow>, BenchError> = cfg
            .solvers
            .iter()
            .map(|&solver| {
                solve_one(
                    solver,
                    s,
                    g,
                    t,
                    model,
                    adj.as_ref(),
                    cfg.timeout,
                    cfg.measure_time,
                )
            })
            .collect();
        rows.map(|rows| InstanceResult {
            instance: s.clone(),
            rows,
        })
    });
    let mut results = Vec::with_capacity(instances.len());
    for r in outcomes {
        results.push(r?);
    }
    for r in &results {
        check_agreement(&r.instance, &r.rows)?;
    }
    let aggregates = aggregate(&results, &cfg.solvers);
    Ok(BenchmarkReport {
        graph_id: graph_id.to_string(),
        results,
        aggregates,
    })
}

/// Full benchmark: load or generate the graph, build the instance set, load
/// the model when needed, run, cross-check, aggregate.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport, BenchError> {
    let g = cfg.graph.load()?;
    let t = ShortestPathTable::compute(&g);
    let instances = generate_instances(&g, &t, cfg)?;
    let model = if cfg.solvers.contains(&SolverKind::BnbGcn) {
        let path = cfg.model.as_ref().ok_or(BenchError::MissingModel)?;
        Some(GcnModel::load(path)?)
    } else {
        None
    };
    run_on_instances(&g, &t, &cfg.graph.graph_id(), &instances, model.as_ref(), cfg)
}

/// Derives the aggregate-CSV path: `bench.csv` → `bench_agg.csv`.
pub fn aggregate_path(per_instance: &Path) -> PathBuf {
    let stem = per_instance
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bench".into());
    per_instance.with_file_name(format!("{stem}_agg.csv"))
}

/// Renders the per-instance CSV.
pub fn render_csv(report: &BenchmarkReport) -> String {
    let mut out = String::with_capacity(64 * report.results.len() + 64);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &report.results {
        for row in &r.rows {
            let cost = row.cost.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                report.graph_id,
                row.solver,
                r.instance.start(),
                r.instance.dest(),
                r.instance.mandatory().len(),
                cost,
                row.visits,
                row.elapsed.as_micros(),
                u8::from(row.timed_out),
            ));
        }
    }
    out
}

/// Renders the aggregate CSV.
pub fn render_aggregate_csv(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    out.push_str(AGGREGATE_CSV_HEADER);
    out.push('\n');
    for a in &report.aggregates {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.solver,
            a.mandatory_count,
            a.instances,
            a.completed,
            a.timeouts,
            a.mean_cost,
            a.mean_visits,
            a.mean_elapsed_us,
        ));
    }
    out
}

/// Writes the per-instance CSV to `path` and the aggregate CSV next to it.
pub fn emit_csv(report: &BenchmarkReport, path: &Path) -> Result<(), BenchError> {
    std::fs::write(path, render_csv(report))?;
    std::fs::write(aggregate_path(path), render_aggregate_csv(report))?;
    Ok(())
}
