use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmtrl::config::{seed_from_env, Algorithm, ResolvedConfig};
use cmtrl::consensus::{lazy_metropolis, GraphSpec};
use cmtrl::exec::Execution;
use cmtrl::harness::{self, MazeDemoOptions, Thresholds};
use cmtrl::lfa::{measure_eps_max, FeatureSet};
use cmtrl::metrics::MetricsTrace;
use cmtrl::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cmtrl", version, about = "Constrained multi-task RL over agent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact-gradient primal-dual natural policy gradient.
    Pdnpg(RunArgs),
    /// Single-trajectory primal-dual natural actor-critic.
    Pdnac(RunArgs),
    /// Actor-critic with a linear critic.
    Lfa(RunArgs),
    /// Three-maze benchmark with and without the lower bounds.
    MazeDemo {
        /// Directory for constrained.csv and unconstrained.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha0: f64,
        #[arg(long, default_value_t = 1.0)]
        eta0: f64,
        /// Graph spec as JSON, e.g. '{"preset":"ring","n":3}'.
        #[arg(long)]
        graph: Option<String>,
        #[arg(long)]
        sequential: bool,
        /// Exit 4 unless every constrained agent crosses only bridge 4 with
        /// violation at most 0.5 and the unconstrained run earns more.
        #[arg(long)]
        check: bool,
    },
    /// Reruns a config over several K and reports the rate table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        algorithm: Option<AlgorithmArg>,
        /// Comma-separated iteration counts.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        /// CSV destination for the table.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the configurations concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Scores a trace against thresholds; exits 4 on failure.
    Score {
        #[arg(long)]
        trace: PathBuf,
        /// Thresholds JSON; defaults check completion, dual bounds and the
        /// consensus envelope.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Config whose problem bounds re-score the final violations.
        #[arg(long)]
        problem_config: Option<PathBuf>,
        /// JSON destination for the verdict.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the lazy Metropolis weights and sigma2 of a graph.
    Spectrum {
        /// Graph spec as JSON, e.g. '{"preset":"ring","n":8}'.
        #[arg(long, conflicts_with = "graph_file", required_unless_present = "graph_file")]
        graph: Option<String>,
        #[arg(long)]
        graph_file: Option<PathBuf>,
        /// CSV destination for W.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Suggests eps_max for a config's features.
    MeasureEpsmax {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Uniform mixing weight of the sampled policies.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AlgorithmArg {
    Pdnpg,
    Pdnac,
    Lfa,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Pdnpg => Algorithm::Pdnpg,
            AlgorithmArg::Pdnac => Algorithm::Pdnac,
            AlgorithmArg::Lfa => Algorithm::Lfa,
        }
    }
}

enum Failure {
    Run(Error),
    Score,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::NoStationaryDistribution(_) => 3,
        Error::MalformedTrace(_) => 4,
        _ => 2,
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::config("", format!("cannot read {}: {e}", path.display())))
}

fn load(path: &Path, algorithm: Algorithm) -> Result<ResolvedConfig, Error> {
    ResolvedConfig::load(&read(path)?, algorithm, seed_from_env()?)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn parse_graph(text: &str) -> Result<GraphSpec, Error> {
    serde_json::from_str(text).map_err(|e| Error::config("/graph", e.to_string()))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Pdnpg(args) => single(Algorithm::Pdnpg, args),
        Command::Pdnac(args) => single(Algorithm::Pdnac, args),
        Command::Lfa(args) => single(Algorithm::Lfa, args),
        Command::MazeDemo { out_dir, k, alpha0, eta0, graph, sequential, check } => {
            if let Some(dir) = &out_dir {
                fs::create_dir_all(dir)?;
            }
            let opts = MazeDemoOptions {
                k,
                alpha0,
                eta0,
                graph: graph.as_deref().map(parse_graph).transpose()?,
                execution: if sequential { Execution::Sequential } else { Execution::Parallel },
            };
            let (report, _) = harness::maze_demo(&opts, out_dir.as_deref())?;
            print_json(&report)?;
            if check {
                let c = &report.constrained;
                let u = &report.unconstrained;
                let ok = c.bridges.iter().all(|b| b == &[4])
                    && c.final_violation.iter().all(|v| *v <= 0.5)
                    && u.bridges.iter().all(|b| b == &[3])
                    && u.final_v0.iter().zip(&c.final_v0).all(|(a, b)| a > b);
                if !ok {
                    return Err(Failure::Score);
                }
            }
            Ok(())
        }
        Command::Sweep { config, algorithm, ks, out, parallel } => {
            let bytes = read(&config)?;
            let raw = cmtrl::config::RunConfig::from_json(&bytes)?;
            let algorithm = algorithm.map(Algorithm::from).or(raw.algorithm).unwrap_or(Algorithm::Pdnpg);
            let resolved = ResolvedConfig::load(&bytes, algorithm, seed_from_env()?)?;
            let table = harness::rate_sweep(&resolved, algorithm, &ks, parallel)?;
            if let Some(path) = out {
                harness::write_sweep_csv(&table, BufWriter::new(File::create(path)?))?;
            }
            print_json(&table)?;
            Ok(())
        }
        Command::Score { trace, thresholds, problem_config, out } => {
            let file = File::open(&trace).map_err(|e| Error::config("", format!("cannot read {}: {e}", trace.display())))?;
            let trace = MetricsTrace::read_csv(BufReader::new(file))?;
            let thresholds: Thresholds = match thresholds {
                Some(path) => {
                    let bytes = read(&path)?;
                    let de = &mut serde_json::Deserializer::from_slice(&bytes);
                    serde_path_to_error::deserialize(de)
                        .map_err(|e| Error::config(format!("/{}", e.path()), e.inner().to_string()))?
                }
                None => Thresholds::default(),
            };
            let problem = problem_config.map(|p| load(&p, Algorithm::Pdnpg)).transpose()?.map(|r| r.problem);
            let report = harness::score_trace(&trace, problem.as_ref(), &thresholds)?;
            if let Some(path) = out {
                serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &report).map_err(Error::from)?;
            }
            print_json(&report)?;
            if report.passed { Ok(()) } else { Err(Failure::Score) }
        }
        Command::Spectrum { graph, graph_file, out } => {
            let text = match (graph, graph_file) {
                (Some(g), _) => g,
                (None, Some(path)) => String::from_utf8_lossy(&read(&path)?).into_owned(),
                (None, None) => unreachable!("clap requires one of the graph flags"),
            };
            let w = lazy_metropolis(&parse_graph(&text)?.build().map_err(|e| Error::config("/graph", e.to_string()))?)?;
            if let Some(path) = out {
                w.write_csv(BufWriter::new(File::create(path)?))?;
            }
            let rows: Vec<&[f64]> = w.as_slice().chunks(w.n()).collect();
            print_json(&json!({ "n": w.n(), "sigma2": w.sigma2(), "spectral_gap": w.spectral_gap(), "W": rows }))?;
            Ok(())
        }
        Command::MeasureEpsmax { config, samples, epsilon } => {
            let resolved = load(&config, Algorithm::Lfa)?;
            let c = &resolved.config;
            let features = FeatureSet::from_spec(c.features, &resolved.problem, c.seed)
                .map_err(|e| Error::config("/features", e.to_string()))?;
            let eps_max = measure_eps_max(&resolved.problem, &features, samples, epsilon, c.seed, c.execution)?;
            print_json(&json!({ "features": c.features.to_string(), "samples": samples, "epsilon": epsilon, "eps_max": eps_max }))?;
            Ok(())
        }
    }
}

fn single(algorithm: Algorithm, args: RunArgs) -> Result<(), Failure> {
    let resolved = load(&args.config, algorithm)?;
    let report = harness::run_experiment(&resolved, algorithm, Some(&args.out))?;
    let finals: Vec<_> = report
        .trace
        .final_rows()
        .iter()
        .map(|r| json!({ "agent": r.agent, "values": r.values, "V0": r.v0, "violation": r.violation, "gap": r.gap }))
        .collect();
    print_json(&json!({
        "algorithm": algorithm.name(),
        "config_hash": resolved.hash,
        "seed": resolved.config.seed,
        "final": finals,
        "bridges": report.bridges,
        "transitions": report.transitions,
        "approximation_warnings": report.approximation_warnings,
    }))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Score) => ExitCode::from(4),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
