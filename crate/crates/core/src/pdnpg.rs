//! Exact-gradient primal-dual natural policy gradient, centralized and over
//! a consensus network.

use serde::{Deserialize, Serialize};

use crate::consensus::{consensus_error, WeightMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate_rewards, task_values, violation_from_values};
use crate::exec::{map_range, Execution};
use crate::metrics::{MetricsTrace, Recorder, TraceHeader, TraceRow};
use crate::policy::PolicyTable;
use crate::problem::MultiTaskProblem;

/// Per-state softmax of a tabular `|S|·|A|` parameter.
pub fn softmax_policy(problem: &MultiTaskProblem, theta: &[f64]) -> Result<PolicyTable> {
    PolicyTable::softmax(problem.n_states(), problem.n_actions(), theta)
}

/// Multipliers `(λᵢ, νᵢ)` of one task, kept in `[0, B_λ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualState {
    pub lambda: f64,
    pub nu: f64,
    pub b_lambda: f64,
}

impl DualState {
    pub fn new(b_lambda: f64) -> Self {
        Self { lambda: 0.0, nu: 0.0, b_lambda }
    }
}

/// Projected dual descent. A multiplier whose bound is infinite stays 0.
pub fn dual_step(dual: DualState, value: f64, lower: f64, upper: f64, eta: f64) -> DualState {
    let clamp = |x: f64| x.clamp(0.0, dual.b_lambda);
    let lambda = if lower.is_finite() { clamp(dual.lambda - eta * (value - lower)) } else { 0.0 };
    let nu = if upper.is_finite() { clamp(dual.nu + eta * (value - upper)) } else { 0.0 };
    DualState { lambda, nu, ..dual }
}

/// `θᵢ ← Σⱼ Wᵢⱼ θⱼ + α (1/N + λᵢ − νᵢ) Qᵢ` for every agent.
pub fn npg_actor_step(
    thetas: &[Vec<f64>],
    weights: &WeightMatrix,
    directions: &[Vec<f64>],
    duals: &[DualState],
    alpha: f64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let n = thetas.len();
    if weights.n() != n || directions.len() != n || duals.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} agents, {} weights, {} directions, {} duals",
            weights.n(),
            directions.len(),
            duals.len()
        )));
    }
    Ok(map_range(exec, n, |i| {
        let scale = alpha * (1.0 / n as f64 + duals[i].lambda - duals[i].nu);
        let mut next = weights.mix_row(i, thetas);
        next.iter_mut().zip(&directions[i]).for_each(|(t, q)| *t += scale * q);
        next
    }))
}

/// Single-server form `θ ← θ + α Σⱼ (1/N + λⱼ − νⱼ) Qⱼ`.
pub fn central_actor_step(theta: &[f64], directions: &[Vec<f64>], duals: &[DualState], alpha: f64) -> Vec<f64> {
    let n = directions.len() as f64;
    let mut next = theta.to_vec();
    for (q, d) in directions.iter().zip(duals) {
        let scale = alpha * (1.0 / n + d.lambda - d.nu);
        next.iter_mut().zip(q).for_each(|(t, x)| *t += scale * x);
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Central,
    #[default]
    Decentral,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdnpgParams {
    pub iterations: usize,
    pub alpha: f64,
    pub eta: f64,
    pub mode: Mode,
    /// Record metrics every this many iterations (the last one always).
    pub eval_every: usize,
    /// Optimal `V₀` if known; enables the gap column.
    pub oracle_value: Option<f64>,
}

impl PdnpgParams {
    /// `α = α₀/√K`, `η = η₀/√K`.
    pub fn with_schedule(iterations: usize, alpha0: f64, eta0: f64, mode: Mode) -> Self {
        let root = (iterations as f64).sqrt();
        Self { iterations, alpha: alpha0 / root, eta: eta0 / root, mode, eval_every: 1, oracle_value: None }
    }
}

/// `α₀ = c √(1 − σ₂) / N^{1/4}`.
pub fn default_alpha0(scale: f64, sigma2: f64, n_agents: usize) -> f64 {
    scale * (1.0 - sigma2).sqrt() / (n_agents as f64).powf(0.25)
}

/// Upper bound on `maxᵢ ‖θ̄ − θᵢ‖` for an actor step `α` and directions
/// bounded entrywise by `direction_bound`.
pub fn consensus_envelope(problem: &MultiTaskProblem, sigma2: f64, alpha: f64, direction_bound: f64) -> f64 {
    let n = problem.n_tasks() as f64;
    let dim = (n * problem.n_pairs() as f64).sqrt();
    (problem.dual_bound() + 1.0 / n) * dim * direction_bound * alpha / ((1.0 - problem.gamma()) * (1.0 - sigma2))
}

/// Final network state after a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentsOutcome {
    pub thetas: Vec<Vec<f64>>,
    pub policies: Vec<PolicyTable>,
    pub duals: Vec<DualState>,
    /// Largest consensus error over every iteration, recorded or not.
    pub max_consensus_error: f64,
}

pub(crate) fn check_network(problem: &MultiTaskProblem, weights: &WeightMatrix) -> Result<()> {
    if weights.n() != problem.n_tasks() {
        return Err(Error::DimensionMismatch(format!(
            "{} agents for {} tasks",
            weights.n(),
            problem.n_tasks()
        )));
    }
    Ok(())
}

pub(crate) fn should_record(k: usize, iterations: usize, every: usize) -> bool {
    k == iterations || k.is_multiple_of(every.max(1))
}

pub(crate) fn base_header(algorithm: &str, problem: &MultiTaskProblem, n_agents: usize, sigma2: f64) -> TraceHeader {
    let mut h = TraceHeader::new(algorithm, n_agents, problem.n_tasks());
    h.b_lambda = problem.dual_bound();
    h.sigma2 = sigma2;
    h.r_max = problem.r_max();
    h
}

/// Evaluates every agent's policy on all tasks and appends one row each.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_iteration(
    problem: &MultiTaskProblem,
    k: usize,
    policies: &[PolicyTable],
    consensus: f64,
    duals: &[DualState],
    critic_errors: Option<&[f64]>,
    oracle_value: Option<f64>,
    exec: Execution,
    rec: &mut Recorder,
) -> Result<()> {
    let values = map_range(exec, policies.len(), |j| task_values(problem, &policies[j]));
    let lambda: Vec<f64> = duals.iter().map(|d| d.lambda).collect();
    let nu: Vec<f64> = duals.iter().map(|d| d.nu).collect();
    for (agent, values) in values.into_iter().enumerate() {
        let values = values?;
        let v0 = values.iter().sum::<f64>() / values.len() as f64;
        rec.push(TraceRow {
            k,
            agent,
            violation: violation_from_values(&values, problem.lower(), problem.upper()),
            values,
            v0,
            consensus_error: consensus,
            critic_error: critic_errors.map(|e| e[agent]),
            gap: oracle_value.map(|o| o - v0),
            lambda: lambda.clone(),
            nu: nu.clone(),
        })?;
    }
    Ok(())
}

/// Runs the algorithm, streaming metrics into `rec`.
pub fn run_pdnpg(
    problem: &MultiTaskProblem,
    weights: &WeightMatrix,
    params: &PdnpgParams,
    exec: Execution,
    rec: &mut Recorder,
) -> Result<AgentsOutcome> {
    if params.iterations == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    if !(params.alpha >= 0.0 && params.eta > 0.0) {
        return Err(Error::InvalidParameter("step sizes must satisfy alpha >= 0, eta > 0".into()));
    }
    let n = problem.n_tasks();
    let agents = match params.mode {
        Mode::Central => 1,
        Mode::Decentral => {
            check_network(problem, weights)?;
            n
        }
    };
    let mut thetas = vec![vec![0.0; problem.n_pairs()]; agents];
    let mut duals = vec![DualState::new(problem.dual_bound()); n];
    let mut max_consensus: f64 = 0.0;
    for k in 0..=params.iterations {
        let policies = map_range(exec, agents, |i| softmax_policy(problem, &thetas[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let consensus = consensus_error(&thetas);
        max_consensus = max_consensus.max(consensus);
        if should_record(k, params.iterations, params.eval_every) {
            record_iteration(problem, k, &policies, consensus, &duals, None, params.oracle_value, exec, rec)?;
        }
        if k == params.iterations {
            return Ok(AgentsOutcome { thetas, policies, duals, max_consensus_error: max_consensus });
        }
        // task i is evaluated under the policy of the agent that owns it
        let owner = |i: usize| if agents == 1 { 0 } else { i };
        let evals = map_range(exec, n, |i| evaluate_rewards(problem, problem.rewards(i), &policies[owner(i)]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let directions: Vec<Vec<f64>> = evals.iter().map(|e| e.q.clone()).collect();
        thetas = match params.mode {
            Mode::Central => vec![central_actor_step(&thetas[0], &directions, &duals, params.alpha)],
            Mode::Decentral => npg_actor_step(&thetas, weights, &directions, &duals, params.alpha, exec)?,
        };
        for (i, d) in duals.iter_mut().enumerate() {
            *d = dual_step(*d, evals[i].v_rho, problem.lower()[i], problem.upper()[i], params.eta);
        }
        if thetas.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("policy parameters diverged at iteration {}", k + 1)));
        }
    }
    unreachable!()
}

/// In-memory run; a numerical failure leaves the rows so far plus an error
/// footer in the trace.
pub fn pdnpg_trace(
    problem: &MultiTaskProblem,
    weights: &WeightMatrix,
    params: &PdnpgParams,
    exec: Execution,
) -> Result<(MetricsTrace, Option<AgentsOutcome>)> {
    let (agents, sigma2) = match params.mode {
        Mode::Central => (1, 0.0),
        Mode::Decentral => (problem.n_tasks(), weights.sigma2()),
    };
    let mut rec = Recorder::new(base_header("pdnpg", problem, agents, sigma2));
    match run_pdnpg(problem, weights, params, exec, &mut rec) {
        Ok(out) => Ok((rec.finish()?, Some(out))),
        Err(e @ Error::Numerical(_)) => Ok((rec.fail(&e.to_string())?, None)),
        Err(e) => Err(e),
    }
}
