//! Experiment orchestration: config-driven runs, oracles for the gap column,
//! rate sweeps, trace scoring and the three-maze demonstration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{config_hash, Algorithm, OracleKind, OracleSpec, ResolvedConfig, RunConfig};
use crate::consensus::GraphSpec;
use crate::error::{Error, Result};
use crate::eval::{greedy_rollout, task_values, violation_from_values};
use crate::exec::{map_range, Execution};
use crate::lfa::{compute_b_omega, run_lfa, FeatureSet, LfaParams};
use crate::maze::GridWorld;
use crate::metrics::{MetricsTrace, Recorder, TraceHeader};
use crate::oracle::{lagrangian_dual_oracle, optimal_policy};
use crate::pdnac::{check_step_premise, run_pdnac, PdnacParams};
use crate::pdnpg::{base_header, consensus_envelope, run_pdnpg, AgentsOutcome, Mode, PdnpgParams};
use crate::problem::MultiTaskProblem;

fn float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Best `V₀` among single-bridge routes that satisfy every bound.
fn best_feasible_route(world: &GridWorld) -> Result<Option<f64>> {
    let p = &world.problem;
    let n_bridges = (0..p.n_states()).filter_map(|s| world.bridge_at(s)).max().map_or(0, |b| b + 1);
    let mut best: Option<f64> = None;
    for b in 0..n_bridges {
        let Ok((policy, _)) = world.policy_via_bridge(b) else { continue };
        let values = task_values(p, &policy)?;
        if violation_from_values(&values, p.lower(), p.upper()) == 0.0 {
            let v0 = values.iter().sum::<f64>() / values.len() as f64;
            best = Some(best.map_or(v0, |x: f64| x.max(v0)));
        }
    }
    Ok(best)
}

fn mean_rewards(problem: &MultiTaskProblem) -> Vec<f64> {
    let n = problem.n_tasks() as f64;
    (0..problem.n_pairs()).map(|i| (0..problem.n_tasks()).map(|t| problem.rewards(t)[i]).sum::<f64>() / n).collect()
}

/// Optimal `V₀` used for the gap column. Unconstrained problems are solved
/// exactly by policy iteration; constrained mazes use the best feasible
/// single-bridge route; small constrained problems use the Lagrangian dual.
pub fn oracle_value(resolved: &ResolvedConfig) -> Result<Option<f64>> {
    let p = &resolved.problem;
    match resolved.config.oracle {
        OracleSpec::Value(v) => return Ok(Some(v)),
        OracleSpec::Named(OracleKind::None) => return Ok(None),
        OracleSpec::Named(OracleKind::Auto) => {}
    }
    let finite = p.lower().iter().chain(p.upper()).filter(|b| b.is_finite()).count();
    if finite == 0 {
        return Ok(Some(optimal_policy(p, &mean_rewards(p))?.1));
    }
    if let Some(world) = &resolved.world {
        return best_feasible_route(world);
    }
    if finite <= 3 && p.n_pairs() <= 64 {
        return Ok(Some(lagrangian_dual_oracle(p, p.dual_bound())?.value));
    }
    Ok(None)
}

/// Final state of a run plus what the trace alone does not carry.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub trace: MetricsTrace,
    pub outcome: AgentsOutcome,
    /// Bridges (1-based) crossed by each agent's greedy rollout, for mazes.
    pub bridges: Option<Vec<Vec<usize>>>,
    pub transitions: Option<usize>,
    pub approximation_warnings: Option<usize>,
}

enum Plan {
    Pdnpg(PdnpgParams),
    Pdnac(PdnacParams),
    Lfa(LfaParams, FeatureSet),
}

fn plan(resolved: &ResolvedConfig, algorithm: Algorithm, oracle: Option<f64>) -> Result<(Plan, TraceHeader)> {
    let c = &resolved.config;
    let p = &resolved.problem;
    let agents = resolved.n_agents();
    let mut header = base_header(algorithm.name(), p, agents, resolved.sigma2());
    header.config_hash = resolved.hash.clone();
    header.seed = Some(c.seed);
    let decentral = c.mode == Mode::Decentral;
    let plan = match algorithm {
        Algorithm::Pdnpg => {
            let mut params = PdnpgParams::with_schedule(c.k, resolved.alpha0(), c.eta0, c.mode);
            params.eval_every = c.eval_every;
            params.oracle_value = oracle;
            header.extra.push(("alpha".into(), float(params.alpha)));
            header.extra.push(("eta".into(), float(params.eta)));
            if decentral {
                let env = consensus_envelope(p, resolved.weights.sigma2(), params.alpha, p.r_max());
                header.extra.push(("consensus_envelope".into(), float(env)));
            }
            Plan::Pdnpg(params)
        }
        Algorithm::Pdnac => {
            check_step_premise(p, resolved.mu_lower(), c.eps0, c.beta0);
            let mut params =
                PdnacParams::with_schedule(c.k, resolved.alpha0(), c.beta0, c.eta0, c.eps0, c.mode, c.seed);
            params.eval_every = c.eval_every;
            params.oracle_value = oracle;
            for (k, v) in [("alpha", params.alpha), ("beta", params.beta), ("eta", params.eta), ("epsilon", params.epsilon)] {
                header.extra.push((k.into(), float(v)));
            }
            if decentral {
                let env = consensus_envelope(p, resolved.weights.sigma2(), params.alpha, p.value_bound() + 1.0);
                header.extra.push(("consensus_envelope".into(), float(env)));
            }
            Plan::Pdnac(params)
        }
        Algorithm::Lfa => {
            let features = FeatureSet::from_spec(c.features, p, c.seed).map_err(|e| Error::config("/features", e.to_string()))?;
            let alpha_scale = c.alpha0.unwrap_or(c.alpha_scale);
            let mut params = LfaParams::with_schedule(
                c.k,
                1,
                agents,
                resolved.sigma2(),
                alpha_scale,
                c.beta0,
                c.eta0,
                c.eps0,
                c.eps_max,
                c.seed,
            );
            params.inner = c.t.unwrap_or_else(|| LfaParams::default_inner(c.k, agents, params.beta, params.epsilon));
            params.eval_every = c.eval_every;
            params.oracle_value = oracle;
            for (k, v) in [("alpha", params.alpha), ("beta", params.beta), ("eta", params.eta), ("epsilon", params.epsilon)] {
                header.extra.push((k.into(), float(v)));
            }
            let b_omega = compute_b_omega(&features, p.gamma(), c.eps_max, p.n_pairs(), p.r_max());
            header.extra.push(("b_omega".into(), float(b_omega)));
            header.extra.push(("inner_steps".into(), params.inner.to_string()));
            header.extra.push(("features".into(), c.features.to_string()));
            Plan::Lfa(params, features)
        }
    };
    if let Some(v) = oracle {
        header.extra.push(("oracle_value".into(), float(v)));
    }
    Ok((plan, header))
}

fn bridges_of(world: &GridWorld, outcome: &AgentsOutcome) -> Result<Vec<Vec<usize>>> {
    outcome
        .policies
        .iter()
        .map(|pi| {
            let rollout = greedy_rollout(&world.problem, pi, world.start, 4 * world.problem.n_states())?;
            Ok(world.bridges_crossed(&rollout.path).into_iter().map(|b| b + 1).collect())
        })
        .collect()
}

/// Runs one configured experiment. With `out`, the trace is streamed to that
/// file as rows are produced; a numerical failure leaves the rows written so
/// far followed by an error footer, and is returned as the error.
pub fn run_experiment(resolved: &ResolvedConfig, algorithm: Algorithm, out: Option<&Path>) -> Result<RunReport> {
    let oracle = oracle_value(resolved)?;
    let (plan, header) = plan(resolved, algorithm, oracle)?;
    let mut rec = match out {
        Some(path) => Recorder::streaming(header, Box::new(BufWriter::new(File::create(path)?)))?,
        None => Recorder::new(header),
    };
    let exec = resolved.config.execution;
    let (p, w) = (&resolved.problem, &resolved.weights);
    let result = match &plan {
        Plan::Pdnpg(params) => run_pdnpg(p, w, params, exec, &mut rec).map(|o| (o, None, None)),
        Plan::Pdnac(params) => run_pdnac(p, w, params, exec, &mut rec).map(|o| (o.agents, Some(o.transitions), None)),
        Plan::Lfa(params, features) => run_lfa(p, w, features, params, exec, &mut rec)
            .map(|o| (o.agents, Some(o.transitions), Some(o.approximation_warnings))),
    };
    match result {
        Ok((outcome, transitions, approximation_warnings)) => {
            let trace = rec.finish()?;
            let bridges = resolved.world.as_ref().map(|w| bridges_of(w, &outcome)).transpose()?;
            Ok(RunReport { trace, outcome, bridges, transitions, approximation_warnings })
        }
        Err(e) => {
            rec.fail(&e.to_string())?;
            Err(e)
        }
    }
}

/// `min_k (|mean_{j≤k} gap_j| + mean_{j≤k} violation_j)` over one agent's
/// recorded rows; `None` without a gap column.
pub fn best_running_average(trace: &MetricsTrace, agent: usize) -> Option<f64> {
    let (mut gap, mut viol, mut best, mut count) = (0.0, 0.0, f64::INFINITY, 0.0);
    for r in trace.agent_rows(agent) {
        gap += r.gap?;
        viol += r.violation;
        count += 1.0;
        best = best.min((gap / count).abs() + viol / count);
    }
    (count > 0.0).then_some(best)
}

/// `min_k mean_{j≤k} violation_j` for one agent.
pub fn best_violation_average(trace: &MetricsTrace, agent: usize) -> f64 {
    let (mut viol, mut best, mut count) = (0.0, f64::INFINITY, 0.0);
    for r in trace.agent_rows(agent) {
        viol += r.violation;
        count += 1.0;
        best = best.min(viol / count);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "K")]
    pub k: usize,
    /// Worst agent's best running average of |gap| + violation.
    pub best_running_average: Option<f64>,
    /// Worst agent's best running average of violation alone.
    pub best_violation_average: f64,
    /// Previous row's value over this one.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of log(metric) against log(K); the violation-only
    /// metric is used when no oracle is available.
    pub slope: Option<f64>,
}

fn log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, y)| *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Reruns the configured experiment for every `K` in `ks` (metrics at
/// every iteration). Runs are independent; `parallel` spreads them over
/// threads.
pub fn rate_sweep(resolved: &ResolvedConfig, algorithm: Algorithm, ks: &[usize], parallel: bool) -> Result<SweepTable> {
    if ks.len() < 2 {
        return Err(Error::InvalidParameter("a sweep needs at least two values of K".into()));
    }
    let exec = if parallel { Execution::Parallel } else { Execution::Sequential };
    let results = map_range(exec, ks.len(), |i| -> Result<SweepRow> {
        let mut r = resolved.clone();
        r.config.k = ks[i];
        r.config.eval_every = 1;
        if parallel {
            r.config.execution = Execution::Sequential;
        }
        let report = run_experiment(&r, algorithm, None)?;
        let agents = report.trace.header.n_agents;
        let gaps: Option<Vec<f64>> = (0..agents).map(|j| best_running_average(&report.trace, j)).collect();
        Ok(SweepRow {
            k: ks[i],
            best_running_average: gaps.map(|g| g.into_iter().fold(f64::NEG_INFINITY, f64::max)),
            best_violation_average: (0..agents)
                .map(|j| best_violation_average(&report.trace, j))
                .fold(f64::NEG_INFINITY, f64::max),
            ratio: None,
        })
    });
    let mut rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    let use_gap = rows.iter().all(|r| r.best_running_average.is_some());
    let metric = |r: &SweepRow| if use_gap { r.best_running_average.unwrap() } else { r.best_violation_average };
    for i in 1..rows.len() {
        let ratio = metric(&rows[i - 1]) / metric(&rows[i]);
        rows[i].ratio = Some(ratio);
    }
    let slope = log_slope(&rows.iter().map(|r| (r.k as f64, metric(r))).collect::<Vec<_>>());
    Ok(SweepTable { rows, slope })
}

/// Predicates checked by [`score_trace`]; unset limits are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_final_violation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_final_violation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_final_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_final_v0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_final_critic_error: Option<f64>,
    #[serde(default = "yes")]
    pub dual_bounds: bool,
    #[serde(default = "yes")]
    pub consensus_envelope: bool,
    #[serde(default = "yes")]
    pub complete: bool,
}

fn yes() -> bool {
    true
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_final_violation: None,
            min_final_violation: None,
            max_final_gap: None,
            min_final_v0: None,
            max_final_critic_error: None,
            dual_bounds: true,
            consensus_envelope: true,
            complete: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub passed: bool,
    pub predicates: Vec<Predicate>,
}

/// Evaluates `thresholds` against a trace. With `problem`, final violations
/// are recomputed from the value columns against that problem's bounds.
pub fn score_trace(trace: &MetricsTrace, problem: Option<&MultiTaskProblem>, thresholds: &Thresholds) -> Result<ScoreReport> {
    let finals = trace.final_rows();
    if finals.is_empty() {
        return Err(Error::MalformedTrace("trace has no rows".into()));
    }
    let mut predicates = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        predicates.push(Predicate { name: name.into(), passed, detail });
    };
    if thresholds.complete {
        check("complete", trace.error.is_none(), trace.error.clone().unwrap_or_else(|| "no error footer".into()));
    }
    if thresholds.dual_bounds {
        let b = trace.header.b_lambda;
        let bad = trace.rows.iter().flat_map(|r| r.lambda.iter().chain(&r.nu)).filter(|x| !(0.0..=b).contains(*x)).count();
        check("dual_bounds", bad == 0, format!("{bad} multipliers outside [0, {b}]"));
    }
    if thresholds.consensus_envelope {
        if let Some(env) = trace.header.extra("consensus_envelope") {
            let env: f64 = env.parse().map_err(|_| Error::MalformedTrace("bad consensus_envelope".into()))?;
            let worst = trace.rows.iter().map(|r| r.consensus_error).fold(0.0, f64::max);
            check("consensus_envelope", worst <= env, format!("max consensus error {worst:e}, envelope {env:e}"));
        }
    }
    let violations: Vec<f64> = match problem {
        Some(p) => {
            if p.n_tasks() != trace.header.n_tasks {
                return Err(Error::DimensionMismatch("problem and trace disagree on the task count".into()));
            }
            finals.iter().map(|r| violation_from_values(&r.values, p.lower(), p.upper())).collect()
        }
        None => finals.iter().map(|r| r.violation).collect(),
    };
    let worst_violation = violations.iter().copied().fold(0.0, f64::max);
    let least_violation = violations.iter().copied().fold(f64::INFINITY, f64::min);
    if let Some(limit) = thresholds.max_final_violation {
        check("max_final_violation", worst_violation <= limit, format!("worst final violation {worst_violation}, limit {limit}"));
    }
    if let Some(limit) = thresholds.min_final_violation {
        check("min_final_violation", least_violation >= limit, format!("least final violation {least_violation}, limit {limit}"));
    }
    if let Some(limit) = thresholds.max_final_gap {
        let gaps: Option<Vec<f64>> = finals.iter().map(|r| r.gap).collect();
        match gaps {
            Some(g) => {
                let worst = g.into_iter().fold(f64::NEG_INFINITY, f64::max);
                check("max_final_gap", worst <= limit, format!("worst final gap {worst}, limit {limit}"));
            }
            None => check("max_final_gap", false, "trace has no gap column".into()),
        }
    }
    if let Some(limit) = thresholds.min_final_v0 {
        let least = finals.iter().map(|r| r.v0).fold(f64::INFINITY, f64::min);
        check("min_final_v0", least >= limit, format!("least final V0 {least}, limit {limit}"));
    }
    if let Some(limit) = thresholds.max_final_critic_error {
        let errs: Option<Vec<f64>> = finals.iter().map(|r| r.critic_error).collect();
        match errs {
            Some(e) => {
                let worst = e.into_iter().fold(0.0, f64::max);
                check("max_final_critic_error", worst <= limit, format!("worst final critic error {worst}, limit {limit}"));
            }
            None => check("max_final_critic_error", false, "trace has no critic error column".into()),
        }
    }
    let passed = predicates.iter().all(|p| p.passed);
    Ok(ScoreReport { passed, predicates })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeRunSummary {
    /// Per agent, the bridges (1-based) its greedy rollout crosses.
    pub bridges: Vec<Vec<usize>>,
    pub final_v0: Vec<f64>,
    pub final_violation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeDemoReport {
    pub constrained: MazeRunSummary,
    pub unconstrained: MazeRunSummary,
    /// Final violation of the unconstrained run measured against the
    /// constrained run's bounds.
    pub unconstrained_posthoc_violation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeDemoOptions {
    pub k: usize,
    pub alpha0: f64,
    pub eta0: f64,
    pub graph: Option<GraphSpec>,
    pub execution: Execution,
}

impl Default for MazeDemoOptions {
    fn default() -> Self {
        Self { k: 5000, alpha0: 1.0, eta0: 1.0, graph: None, execution: Execution::Parallel }
    }
}

fn maze_config(opts: &MazeDemoOptions, constrained: bool) -> RunConfig {
    let json = serde_json::json!({
        "algorithm": "pdnpg",
        "problem": {"preset": {"name": "three_mazes", "constrained": constrained}},
        "K": opts.k,
        "alpha0": opts.alpha0,
        "eta0": opts.eta0,
        "eval_every": (opts.k / 100).max(1),
        "execution": opts.execution,
    });
    let mut config: RunConfig = serde_json::from_value(json).expect("demo config is well formed");
    config.graph = opts.graph.clone();
    config
}

/// Runs the three-maze benchmark with and without the lower bounds. With
/// `out_dir`, writes `constrained.csv` and `unconstrained.csv` there.
pub fn maze_demo(opts: &MazeDemoOptions, out_dir: Option<&Path>) -> Result<(MazeDemoReport, [RunReport; 2])> {
    let mut reports = Vec::new();
    for constrained in [true, false] {
        let config = maze_config(opts, constrained);
        let bytes = serde_json::to_vec(&config)?;
        let resolved = config.resolve(Algorithm::Pdnpg, config_hash(&bytes))?;
        let name = if constrained { "constrained.csv" } else { "unconstrained.csv" };
        let path = out_dir.map(|d| d.join(name));
        reports.push((run_experiment(&resolved, Algorithm::Pdnpg, path.as_deref())?, resolved));
    }
    let summary = |r: &RunReport| MazeRunSummary {
        bridges: r.bridges.clone().unwrap_or_default(),
        final_v0: r.trace.final_rows().iter().map(|x| x.v0).collect(),
        final_violation: r.trace.final_rows().iter().map(|x| x.violation).collect(),
    };
    let constrained_problem = &reports[0].1.problem;
    let posthoc = reports[1]
        .0
        .trace
        .final_rows()
        .iter()
        .map(|r| violation_from_values(&r.values, constrained_problem.lower(), constrained_problem.upper()))
        .collect();
    let report = MazeDemoReport {
        constrained: summary(&reports[0].0),
        unconstrained: summary(&reports[1].0),
        unconstrained_posthoc_violation: posthoc,
    };
    let mut it = reports.into_iter().map(|(r, _)| r);
    Ok((report, [it.next().unwrap(), it.next().unwrap()]))
}

/// Writes a sweep table as CSV.
pub fn write_sweep_csv<W: Write>(table: &SweepTable, mut out: W) -> std::io::Result<()> {
    writeln!(out, "K,best_running_average,best_violation_average,ratio")?;
    let opt = |x: Option<f64>| x.map(float).unwrap_or_default();
    for r in &table.rows {
        writeln!(out, "{},{},{},{}", r.k, opt(r.best_running_average), float(r.best_violation_average), opt(r.ratio))?;
    }
    if let Some(s) = table.slope {
        writeln!(out, "# slope={}", float(s))?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::TraceRow;

    fn inline_config(problem: &MultiTaskProblem, extra: &str) -> Vec<u8> {
        format!(r#"{{"problem": {{"inline": {}}}, "K": 40{extra}}}"#, serde_json::to_string(problem).unwrap()).into_bytes()
    }

    fn small_problem() -> MultiTaskProblem {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        MultiTaskProblem::random(&mut rng, 3, 2, 2, 0.8)
            .unwrap()
            .with_bounds(vec![2.5, f64::NEG_INFINITY], vec![f64::INFINITY, f64::INFINITY])
            .unwrap()
    }

    #[test]
    fn zero_rewards_give_identically_zero_metrics() {
        let p = MultiTaskProblem::new(
            2,
            2,
            vec![0.5; 8],
            vec![vec![0.0; 4], vec![0.0; 4]],
            0.9,
            vec![0.5, 0.5],
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
            1.0,
        )
        .unwrap();
        let r = ResolvedConfig::load(&inline_config(&p, ""), Algorithm::Pdnpg, None).unwrap();
        let table = rate_sweep(&r, Algorithm::Pdnpg, &[10, 40], false).unwrap();
        for row in &table.rows {
            assert_eq!(row.best_running_average, Some(0.0));
            assert_eq!(row.best_violation_average, 0.0);
        }
    }

    #[test]
    fn same_config_same_bytes_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = inline_config(&small_problem(), r#", "seed": 1"#);
        for algorithm in [Algorithm::Pdnpg, Algorithm::Pdnac, Algorithm::Lfa] {
            let r = ResolvedConfig::load(&bytes, algorithm, None).unwrap();
            let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
            let mut r_lfa = r.clone();
            r_lfa.config.t = Some(5);
            run_experiment(&r_lfa, algorithm, Some(&a)).unwrap();
            run_experiment(&r_lfa, algorithm, Some(&b)).unwrap();
            assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
            let trace = MetricsTrace::read_csv(std::io::BufReader::new(File::open(&a).unwrap())).unwrap();
            assert_eq!(trace.header.config_hash, config_hash(&bytes));
            assert!(trace.header.extra("oracle_value").is_some());
        }
    }

    #[test]
    fn scoring_names_the_failed_predicate() {
        let r = ResolvedConfig::load(&inline_config(&small_problem(), ""), Algorithm::Pdnpg, None).unwrap();
        let report = run_experiment(&r, Algorithm::Pdnpg, None).unwrap();
        let ok = score_trace(&report.trace, None, &Thresholds::default()).unwrap();
        assert!(ok.passed, "{ok:?}");

        let mut broken = report.trace.clone();
        let last = broken.rows.len() - 1;
        broken.rows[last].lambda[0] = -1.0;
        let strict = Thresholds { max_final_violation: Some(-1.0), ..Thresholds::default() };
        let bad = score_trace(&broken, None, &strict).unwrap();
        assert!(!bad.passed);
        let failed: Vec<&str> = bad.predicates.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect();
        assert_eq!(failed, vec!["dual_bounds", "max_final_violation"]);
    }

    #[test]
    fn thresholds_round_trip_and_reject_unknown_keys() {
        let t = Thresholds { max_final_violation: Some(0.5), min_final_v0: Some(1.0), ..Thresholds::default() };
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Thresholds>(&json).unwrap(), t);
        assert!(serde_json::from_str::<Thresholds>(r#"{"max_violation": 1}"#).is_err());
    }

    #[test]
    fn running_average_definitions() {
        let mut t = MetricsTrace::new(TraceHeader::new("pdnpg", 1, 1));
        for (k, (gap, viol)) in [(2.0, 1.0), (-1.0, 0.0), (0.5, 0.0)].into_iter().enumerate() {
            t.rows.push(TraceRow {
                k,
                agent: 0,
                values: vec![0.0],
                v0: 0.0,
                violation: viol,
                consensus_error: 0.0,
                critic_error: None,
                gap: Some(gap),
                lambda: vec![0.0],
                nu: vec![0.0],
            });
        }
        // averages: (2+1)=3, (0.5+0.5)=1, (0.5+1/3)
        assert!((best_running_average(&t, 0).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        assert!((best_violation_average(&t, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((log_slope(&[(100.0, 1.0), (400.0, 0.5)]).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn numerical_failure_leaves_partial_trace_with_footer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let bytes = inline_config(&small_problem(), r#", "alpha0": 1e308, "eval_every": 1"#);
        let r = ResolvedConfig::load(&bytes, Algorithm::Pdnpg, None).unwrap();
        let err = run_experiment(&r, Algorithm::Pdnpg, Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)) || matches!(err, Error::InvalidParameter(_)), "{err}");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.trim_end().lines().last().unwrap().starts_with("# error="));
        let trace = MetricsTrace::read_csv(text.as_bytes()).unwrap();
        assert!(!trace.rows.is_empty());
    }
}
