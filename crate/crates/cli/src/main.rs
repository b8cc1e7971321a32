//! `passby` — command-line workflow around the solver suite: generate
//! graphs, build training datasets, train the next-mandatory-node predictor,
//! solve single instances, and run solver benchmarks.
//!
//! Settings are layered: built-in defaults, then `--config key=value` file
//! entries, then command-line flags. Exit codes: 0 success, 2 cross-solver
//! cost disagreement, 3 invalid configuration or usage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use passby_core::bench::{
    self, BenchError, BenchmarkConfig, GraphSource, SolverKind,
};
use passby_core::bnb;
use passby_core::datagen::{self, Dataset};
use passby_core::gcn::{normalized_adjacency, GcnModel, TrainConfig};
use passby_core::planning::{forward_astar, MstHeuristic};
use passby_core::{Instance, ShortestPathTable, WeightedGraph};

#[derive(Parser)]
#[command(
    name = "passby",
    version,
    about = "Optimal path planning with mandatory pass-by nodes"
)]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Graph file in the plain text format.
    #[arg(long, global = true)]
    graph: Option<PathBuf>,
    /// Model file (binary format produced by `train`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output path (defaults to stdout for text artifacts).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Per-instance solver timeout in seconds; 0 disables the timeout.
    #[arg(long, global = true)]
    timeout_secs: Option<u64>,
    /// Settings file with one key=value per line; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a connected random graph with integer weights.
    GenGraph {
        /// Node count.
        #[arg(long)]
        nodes: Option<usize>,
        /// Target average degree.
        #[arg(long)]
        avg_degree: Option<f64>,
    },
    /// Print all-pairs shortest-path costs as CSV.
    Apsp {
        /// Also reconstruct one path, printed to stderr.
        #[arg(long)]
        from: Option<usize>,
        #[arg(long)]
        to: Option<usize>,
    },
    /// Generate a training dataset by backwards search from every terminal.
    GenData {
        /// Virtual search budget in seconds (drives a deterministic
        /// expansion quota; wall time is typically much lower).
        #[arg(long)]
        budget_secs: Option<u64>,
        /// Largest mandatory-set size kept in the dataset.
        #[arg(long)]
        max_mandatory: Option<usize>,
    },
    /// Train the next-mandatory-node predictor on a dataset.
    Train {
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Fraction of pairs held out for the accuracy report.
        #[arg(long)]
        holdout: Option<f64>,
    },
    /// Solve one instance ("start dest m1,m2,..." with "-" for no
    /// mandatory nodes).
    Solve {
        #[arg(long)]
        instance: String,
        /// One of: dp, bnb, bnb_gcn, astar_mst.
        #[arg(long)]
        solver: Option<String>,
    },
    /// Run the solver benchmark and emit per-instance and aggregate CSVs.
    Bench {
        /// Comma-separated solver list.
        #[arg(long)]
        solvers: Option<String>,
        /// Comma-separated mandatory-set sizes.
        #[arg(long)]
        counts: Option<String>,
        /// Instances drawn per kept terminal pair per size.
        #[arg(long)]
        per_pair: Option<usize>,
        /// Fraction of terminal pairs discarded (shortest first).
        #[arg(long)]
        ratio: Option<f64>,
        /// Measure wall-clock time per solve (false zeroes elapsed_us,
        /// making the CSV byte-reproducible).
        #[arg(long)]
        measure_time: Option<bool>,
        /// Generated-graph node count when no --graph file is given.
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        avg_degree: Option<f64>,
    },
    /// Predict a visiting order and report the probing upper bound.
    Probe {
        #[arg(long)]
        instance: String,
    },
}

/// Every tunable with a default, overridable from the config file and then
/// from flags.
#[derive(Debug, Clone)]
struct Settings {
    seed: u64,
    timeout_secs: u64,
    nodes: usize,
    avg_degree: f64,
    budget_secs: u64,
    max_mandatory: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    holdout: f64,
    ratio: f64,
    counts: Vec<usize>,
    per_pair: usize,
    solvers: Vec<SolverKind>,
    measure_time: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            timeout_secs: 300,
            nodes: 22,
            avg_degree: 3.5,
            budget_secs: 600,
            max_mandatory: 12,
            epochs: 3,
            batch_size: 64,
            learning_rate: 1e-4,
            holdout: 0.0,
            ratio: 0.8,
            counts: (5..=12).collect(),
            per_pair: 1,
            solvers: SolverKind::ALL.to_vec(),
            measure_time: true,
        }
    }
}

/// Error wrapper that maps onto exit code 3.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(config_err(format!("expected a boolean, got {other:?}"))),
    }
}

fn parse_counts(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| config_err(format!("bad count {p:?}: {e}")))
        })
        .collect()
}

fn parse_solvers(v: &str) -> Result<Vec<SolverKind>> {
    v.split(',')
        .map(|p| p.trim().parse::<SolverKind>().map_err(config_err))
        .collect()
}

impl Settings {
    fn apply_config_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("config line {}: missing '='", idx + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: std::num::ParseIntError| {
                config_err(format!("config line {}: {e}", idx + 1))
            };
            let bad_f = |e: std::num::ParseFloatError| {
                config_err(format!("config line {}: {e}", idx + 1))
            };
            match key {
                "seed" => self.seed = value.parse().map_err(bad)?,
                "timeout_secs" => self.timeout_secs = value.parse().map_err(bad)?,
                "nodes" => self.nodes = value.parse().map_err(bad)?,
                "avg_degree" => self.avg_degree = value.parse().map_err(bad_f)?,
                "budget_secs" => self.budget_secs = value.parse().map_err(bad)?,
                "max_mandatory" => self.max_mandatory = value.parse().map_err(bad)?,
                "epochs" => self.epochs = value.parse().map_err(bad)?,
                "batch_size" => self.batch_size = value.parse().map_err(bad)?,
                "learning_rate" => self.learning_rate = value.parse().map_err(bad_f)?,
                "holdout" => self.holdout = value.parse().map_err(bad_f)?,
                "ratio" => self.ratio = value.parse().map_err(bad_f)?,
                "counts" => self.counts = parse_counts(value)?,
                "per_pair" => self.per_pair = value.parse().map_err(bad)?,
                "solvers" => self.solvers = parse_solvers(value)?,
                "measure_time" => self.measure_time = parse_bool(value)?,
                other => {
                    return Err(config_err(format!(
                        "config line {}: unknown key {other:?}",
                        idx + 1
                    )))
                }
            }
        }
        Ok(())
    }

    fn timeout(&self) -> Option<Duration> {
        (self.timeout_secs > 0).then(|| Duration::from_secs(self.timeout_secs))
    }
}

fn graph_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".to_string())
}

fn load_graph(cli_graph: &Option<PathBuf>) -> Result<(WeightedGraph, String)> {
    let path = cli_graph
        .as_ref()
        .ok_or_else(|| config_err("this command needs --graph"))?;
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading graph {}", path.display()))?;
    let g = WeightedGraph::parse(&text).map_err(|e| config_err(e.to_string()))?;
    Ok((g, graph_id_of(path)))
}

fn write_text_artifact(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_instance(text: &str, n: usize) -> Result<Instance> {
    let raw: Instance = text
        .parse()
        .map_err(|e| config_err(format!("bad instance {text:?}: {e}")))?;
    let s = Instance::new(raw.start(), raw.dest(), raw.mandatory().iter().copied());
    if !s.is_valid_for(n) {
        return Err(config_err(format!(
            "instance {s} does not fit a graph with {n} nodes"
        )));
    }
    Ok(s)
}

fn run(cli: Cli) -> Result<()> {
    let mut st = Settings::default();
    if let Some(path) = &cli.config {
        st.apply_config_file(path)?;
    }
    if let Some(seed) = cli.seed {
        st.seed = seed;
    }
    if let Some(t) = cli.timeout_secs {
        st.timeout_secs = t;
    }

    match cli.command {
        Command::GenGraph { nodes, avg_degree } => {
            let n = nodes.unwrap_or(st.nodes);
            let d = avg_degree.unwrap_or(st.avg_degree);
            if n == 0 {
                return Err(config_err("a graph needs at least one node"));
            }
            let g = WeightedGraph::random_connected(n, d, st.seed);
            write_text_artifact(&cli.out, &g.to_text())?;
            eprintln!(
                "generated graph: {} nodes, {} edges, seed {}",
                g.node_count(),
                g.edges().len(),
                st.seed
            );
        }
        Command::Apsp { from, to } => {
            let (g, _) = load_graph(&cli.graph)?;
            let t = ShortestPathTable::compute(&g);
            let n = g.node_count();
            let mut csv = String::from("i,j,cost\n");
            for i in 0..n {
                for j in 0..n {
                    let _ = writeln!(csv, "{i},{j},{}", t.cost(i, j));
                }
            }
            write_text_artifact(&cli.out, &csv)?;
            if let (Some(a), Some(b)) = (from, to) {
                if a >= n || b >= n {
                    return Err(config_err(format!("--from/--to out of range 0..{n}")));
                }
                let path: Vec<String> =
                    t.reconstruct_path(a, b).iter().map(|v| v.to_string()).collect();
                eprintln!("path {a} -> {b}: {} (cost {})", path.join(" "), t.cost(a, b));
            }
        }
        Command::GenData {
            budget_secs,
            max_mandatory,
        } => {
            let (g, graph_id) = load_graph(&cli.graph)?;
            let budget = Duration::from_secs(budget_secs.unwrap_or(st.budget_secs));
            let cap = max_mandatory.unwrap_or(st.max_mandatory);
            let data = datagen::backwards_astar_generate(&g, &graph_id, budget, cap, st.seed);
            write_text_artifact(&cli.out, &data.to_text())?;
            eprintln!(
                "dataset: {} pairs from {} terminals (budget {}s, max |M| {cap})",
                data.len(),
                g.node_count(),
                budget.as_secs()
            );
        }
        Command::Train {
            data,
            epochs,
            batch_size,
            learning_rate,
            holdout,
        } => {
            let (g, _) = load_graph(&cli.graph)?;
            let out = cli
                .out
                .as_ref()
                .ok_or_else(|| config_err("train needs --out for the model file"))?;
            let text = std::fs::read_to_string(&data)
                .with_context(|| format!("reading dataset {}", data.display()))?;
            let dataset =
                Dataset::parse(&text).map_err(|e| config_err(e.to_string()))?;
            let holdout = holdout.unwrap_or(st.holdout);
            if !(0.0..1.0).contains(&holdout) {
                return Err(config_err("holdout fraction must be in [0, 1)"));
            }
            let (train_set, held_out) = if holdout > 0.0 {
                let (rest, held) = datagen::shuffle_split(&dataset, 1.0 - holdout, st.seed);
                (rest, Some(held))
            } else {
                (dataset, None)
            };
            let adj = normalized_adjacency(&g);
            let mut model = GcnModel::new(&train_set.graph_id, g.node_count(), st.seed);
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(st.epochs),
                batch_size: batch_size.unwrap_or(st.batch_size),
                learning_rate: learning_rate.unwrap_or(st.learning_rate),
                seed: st.seed,
            };
            let curve = model
                .train(&train_set, &adj, &cfg)
                .map_err(|e| anyhow!(e.to_string()))?;
            model.save(out).map_err(|e| anyhow!(e.to_string()))?;
            eprintln!(
                "trained on {} pairs for {} epochs; loss {:.4} -> {:.4}",
                train_set.len(),
                cfg.epochs,
                curve.first().copied().unwrap_or(f64::NAN),
                curve.last().copied().unwrap_or(f64::NAN)
            );
            if let Some(held) = held_out {
                let acc = model.next_mandatory_accuracy(&held.pairs, &adj);
                println!("holdout_accuracy {acc:.4}");
            }
        }
        Command::Solve { instance, solver } => {
            let (g, _) = load_graph(&cli.graph)?;
            let t = ShortestPathTable::compute(&g);
            let s = parse_instance(&instance, g.node_count())?;
            let kind: SolverKind = solver
                .as_deref()
                .unwrap_or("bnb")
                .parse()
                .map_err(config_err)?;
            let timeout = st.timeout();
            let (cost, visits, order, path) = match kind {
                SolverKind::Dp => {
                    let r = bnb::dp_solve(&s, &t, bnb::DEFAULT_DP_CAP, timeout)
                        .map_err(|e| anyhow!(e.to_string()))?;
                    let (path, _) = bnb::order_to_path(&s, &r.order, &t)
                        .map_err(|e| anyhow!(e.to_string()))?;
                    (r.cost, r.state_visits, Some(r.order), path)
                }
                SolverKind::Bnb | SolverKind::BnbGcn => {
                    let initial = if kind == SolverKind::BnbGcn {
                        let path = cli
                            .model
                            .as_ref()
                            .ok_or_else(|| config_err("bnb_gcn needs --model"))?;
                        let model =
                            GcnModel::load(path).map_err(|e| config_err(e.to_string()))?;
                        if model.node_count() != g.node_count() {
                            return Err(config_err(format!(
                                "model is bound to {} nodes, graph has {}",
                                model.node_count(),
                                g.node_count()
                            )));
                        }
                        let adj = normalized_adjacency(&g);
                        let (_, bound, order) = model.probe_upper_bound(&s, &t, &adj);
                        Some((bound, order))
                    } else {
                        None
                    };
                    let r = bnb::dfs_branch_and_bound(&s, &t, initial, timeout)
                        .map_err(|e| anyhow!(e.to_string()))?;
                    let (path, _) = bnb::order_to_path(&s, &r.order, &t)
                        .map_err(|e| anyhow!(e.to_string()))?;
                    (r.cost, r.stats.node_visits, Some(r.order), path)
                }
                SolverKind::AstarMst => {
                    let h = MstHeuristic::new(&t);
                    let r = forward_astar(&s, &g, &h, timeout)
                        .map_err(|e| anyhow!(e.to_string()))?;
                    (r.cost, r.states_visited, None, r.path)
                }
            };
            println!("cost {cost}");
            println!("visits {visits}");
            if let Some(order) = order {
                let text: Vec<String> = order.iter().map(|v| v.to_string()).collect();
                println!("order {}", if text.is_empty() { "-".into() } else { text.join(",") });
            }
            let text: Vec<String> = path.iter().map(|v| v.to_string()).collect();
            println!("path {}", text.join(" "));
        }
        Command::Bench {
            solvers,
            counts,
            per_pair,
            ratio,
            measure_time,
            nodes,
            avg_degree,
        } => {
            let source = match &cli.graph {
                Some(p) => GraphSource::File(p.clone()),
                None => GraphSource::Generated {
                    n: nodes.unwrap_or(st.nodes),
                    avg_degree: avg_degree.unwrap_or(st.avg_degree),
                    seed: st.seed,
                },
            };
            let mut cfg = BenchmarkConfig::new(source);
            cfg.decimation_ratio = ratio.unwrap_or(st.ratio);
            cfg.mandatory_counts = match &counts {
                Some(v) => parse_counts(v)?,
                None => st.counts.clone(),
            };
            cfg.instances_per_pair_per_count = per_pair.unwrap_or(st.per_pair);
            cfg.solvers = match &solvers {
                Some(v) => parse_solvers(v)?,
                None => st.solvers.clone(),
            };
            cfg.timeout = st.timeout();
            cfg.model = cli.model.clone();
            cfg.seed = st.seed;
            cfg.measure_time = measure_time.unwrap_or(st.measure_time);
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("bench.csv"));

            let report = bench::run_benchmark(&cfg)?;
            bench::emit_csv(&report, &out)?;
            println!(
                "{:<10} {:>4} {:>10} {:>9} {:>8} {:>14} {:>14} {:>12}",
                "solver", "|M|", "instances", "completed", "timeouts", "mean_visits",
                "mean_time_us", "mean_cost"
            );
            for a in &report.aggregates {
                println!(
                    "{:<10} {:>4} {:>10} {:>9} {:>8} {:>14.1} {:>14.1} {:>12.3}",
                    a.solver.name(),
                    a.mandatory_count,
                    a.instances,
                    a.completed,
                    a.timeouts,
                    a.mean_visits,
                    a.mean_elapsed_us,
                    a.mean_cost
                );
            }
            eprintln!(
                "wrote {} and {}",
                out.display(),
                bench::aggregate_path(&out).display()
            );
        }
        Command::Probe { instance } => {
            let (g, _) = load_graph(&cli.graph)?;
            let model_path = cli
                .model
                .as_ref()
                .ok_or_else(|| config_err("probe needs --model"))?;
            let model = GcnModel::load(model_path).map_err(|e| config_err(e.to_string()))?;
            if model.node_count() != g.node_count() {
                return Err(config_err(format!(
                    "model is bound to {} nodes, graph has {}",
                    model.node_count(),
                    g.node_count()
                )));
            }
            let t = ShortestPathTable::compute(&g);
            let adj = normalized_adjacency(&g);
            let s = parse_instance(&instance, g.node_count())?;
            let (path, cost, order) = model.probe_upper_bound(&s, &t, &adj);
            let text: Vec<String> = order.iter().map(|v| v.to_string()).collect();
            println!("order {}", if text.is_empty() { "-".into() } else { text.join(",") });
            println!("cost {cost}");
            let text: Vec<String> = path.iter().map(|v| v.to_string()).collect();
            println!("path {}", text.join(" "));
        }
    }
    Ok(())
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(b) = cause.downcast_ref::<BenchError>() {
            return match b {
                BenchError::Disagreement { .. } => 2,
                BenchError::InvalidConfig(_) | BenchError::MissingModel => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 3;
        }
    }
    1
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code_for(&e));
    }
}
