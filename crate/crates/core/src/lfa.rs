//! Linear function approximation: feature matrices, the projected Bellman
//! equation, projected linear TD and the nested-loop actor-critic.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::consensus::{consensus_error, WeightMatrix};
use crate::error::{Error, Result};
use crate::eval::{evaluate_rewards, induced_kernel};
use crate::exec::{for_each_mut, map_range, Execution};
use crate::metrics::{MetricsTrace, Recorder};
use crate::pdnac::{ac_dual_step, markov_step, mix_behavior, SamplerCursor};
use crate::pdnpg::{
    base_header, check_network, npg_actor_step, record_iteration, should_record, AgentsOutcome, DualState,
};
use crate::policy::PolicyTable;
use crate::problem::MultiTaskProblem;

/// Feature matrix `Φ` with one row `φ(s, a)` per pair (row `s * |A| + a`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    phi: DMatrix<f64>,
    sigma_min: f64,
    sigma_max: f64,
}

impl FeatureSet {
    /// Requires `‖φ(s,a)‖₂ ≤ 1` and full column rank.
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.ncols() == 0 || phi.ncols() > phi.nrows() {
            return Err(Error::InvalidParameter(format!(
                "{} features for {} state-action pairs",
                phi.ncols(),
                phi.nrows()
            )));
        }
        for (i, row) in phi.row_iter().enumerate() {
            if row.norm() > 1.0 + 1e-12 {
                return Err(Error::InvalidParameter(format!("feature row {i} has norm {}", row.norm())));
            }
        }
        let sv = phi.singular_values();
        let sigma_max = sv.max();
        let sigma_min = sv.min();
        if !(sigma_min > 1e-12 * sigma_max.max(1.0)) {
            return Err(Error::InvalidParameter("feature matrix is rank deficient".into()));
        }
        Ok(Self { phi, sigma_min, sigma_max })
    }

    pub fn identity(n_pairs: usize) -> Self {
        Self { phi: DMatrix::identity(n_pairs, n_pairs), sigma_min: 1.0, sigma_max: 1.0 }
    }

    /// One-hot features over blocks of `width` consecutive states, per action.
    pub fn tiles(n_states: usize, n_actions: usize, width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidParameter("tile width must be positive".into()));
        }
        let n_tiles = n_states.div_ceil(width);
        let mut phi = DMatrix::zeros(n_states * n_actions, n_tiles * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                phi[(s * n_actions + a, (s / width) * n_actions + a)] = 1.0;
            }
        }
        Self::new(phi)
    }

    /// `d` random orthonormal columns; their rows have norm at most one.
    pub fn random(n_pairs: usize, d: usize, seed: u64) -> Result<Self> {
        if d == 0 || d > n_pairs {
            return Err(Error::InvalidParameter(format!("{d} random features for {n_pairs} pairs")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(n_pairs, d, |_, _| rng.random_range(-1.0..1.0));
        Self::new(raw.qr().q())
    }

    pub fn from_spec(spec: FeatureSpec, problem: &MultiTaskProblem, seed: u64) -> Result<Self> {
        match spec {
            FeatureSpec::Identity => Ok(Self::identity(problem.n_pairs())),
            FeatureSpec::Tiles(w) => Self::tiles(problem.n_states(), problem.n_actions(), w),
            FeatureSpec::Random(d) => Self::random(problem.n_pairs(), d, seed),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_pairs(&self) -> usize {
        self.phi.nrows()
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    /// `Φ x` as a flat `|S|·|A|` table.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.phi * DVector::from_column_slice(x)).iter().copied().collect()
    }

    fn check(&self, problem: &MultiTaskProblem) -> Result<()> {
        if self.n_pairs() != problem.n_pairs() {
            return Err(Error::DimensionMismatch(format!(
                "features cover {} pairs, problem has {}",
                self.n_pairs(),
                problem.n_pairs()
            )));
        }
        Ok(())
    }
}

/// `identity`, `tiles:<width>` or `random:<d>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSpec {
    Identity,
    Tiles(usize),
    Random(usize),
}

impl FromStr for FeatureSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let number = |v: &str| v.parse::<usize>().map_err(|_| format!("bad feature size in '{s}'"));
        match s.split_once(':') {
            None if s == "identity" => Ok(FeatureSpec::Identity),
            Some(("tiles", v)) => number(v).map(FeatureSpec::Tiles),
            Some(("random", v)) => number(v).map(FeatureSpec::Random),
            _ => Err(format!("unknown features '{s}', expected identity, tiles:<w> or random:<d>")),
        }
    }
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSpec::Identity => write!(f, "identity"),
            FeatureSpec::Tiles(w) => write!(f, "tiles:{w}"),
            FeatureSpec::Random(d) => write!(f, "random:{d}"),
        }
    }
}

impl Serialize for FeatureSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// `σ_min(Φ)⁻¹ (R_max √(|S||A|/(1 − γ)) + ε_max)`.
pub fn compute_b_omega(features: &FeatureSet, gamma: f64, eps_max: f64, n_pairs: usize, r_max: f64) -> f64 {
    (r_max * (n_pairs as f64 / (1.0 - gamma)).sqrt() + eps_max) / features.sigma_min()
}

/// `π(a|s) ∝ exp(φ(s,a)ᵀ θ)`.
pub fn loglinear_policy(problem: &MultiTaskProblem, features: &FeatureSet, theta: &[f64]) -> Result<PolicyTable> {
    features.check(problem)?;
    if theta.len() != features.dim() {
        return Err(Error::DimensionMismatch(format!("θ has {} entries for {} features", theta.len(), features.dim())));
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("non-finite policy parameter".into()));
    }
    PolicyTable::softmax(problem.n_states(), problem.n_actions(), &features.apply(theta))
}

/// Unique stationary distribution of a row-stochastic kernel.
pub fn stationary_of_kernel(kernel: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = kernel.nrows();
    let mut system = kernel.transpose() - DMatrix::identity(n, n);
    system.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let advice = "the chain is reducible or numerically so; try an epsilon-mixed policy";
    let fail = |why: &str| Error::NoStationaryDistribution(format!("{why}; {advice}"));
    let sv = system.singular_values();
    if sv.min() <= 1e-12 * sv.max() {
        return Err(fail("balance equations are singular"));
    }
    let mu = system.lu().solve(&rhs).ok_or_else(|| fail("balance equations are singular"))?;
    if mu.iter().any(|x| *x < -1e-12) {
        return Err(fail("solution has negative mass"));
    }
    let mu = DVector::from_iterator(n, mu.iter().map(|x| x.max(0.0)));
    let residual = (kernel.transpose() * &mu - &mu).amax();
    if residual > 1e-10 {
        return Err(fail(&format!("balance residual {residual:e}")));
    }
    Ok(mu.iter().copied().collect())
}

/// Stationary state distribution of the chain `P^π`.
pub fn stationary_distribution(problem: &MultiTaskProblem, policy: &PolicyTable) -> Result<Vec<f64>> {
    stationary_of_kernel(&induced_kernel(problem, policy))
}

/// Pair-to-pair kernel `P̃((s,a),(s′,a′)) = P(s′|s,a) π(a′|s′)`.
fn pair_kernel(problem: &MultiTaskProblem, policy: &PolicyTable) -> DMatrix<f64> {
    let (ns, na) = (problem.n_states(), problem.n_actions());
    let mut k = DMatrix::zeros(ns * na, ns * na);
    for s in 0..ns {
        for a in 0..na {
            for (s2, p) in problem.next_dist(s, a).iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    k[(s * na + a, s2 * na + a2)] = p * policy.prob(s2, a2);
                }
            }
        }
    }
    k
}

/// `H̄ = Φᵀ M (γ P̃ Φ − Φ)` and `b̄ = Φᵀ M r` with `M = diag(μ(s) π(a|s))`.
pub fn assemble_hbar_bbar(
    problem: &MultiTaskProblem,
    task: usize,
    policy: &PolicyTable,
    features: &FeatureSet,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    features.check(problem)?;
    let mu = stationary_distribution(problem, policy)?;
    let na = problem.n_actions();
    let weights = DVector::from_fn(problem.n_pairs(), |i, _| mu[i / na] * policy.as_slice()[i]);
    let phi = features.matrix();
    let weighted = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| weights[i] * phi[(i, j)]);
    let next = pair_kernel(problem, policy) * phi * problem.gamma() - phi;
    let h = weighted.transpose() * next;
    let b = weighted.transpose() * DVector::from_column_slice(problem.rewards(task));
    Ok((h, b))
}

/// `ω* = −H̄⁻¹ b̄` for a completely mixed policy.
pub fn solve_projected_bellman(
    problem: &MultiTaskProblem,
    task: usize,
    policy: &PolicyTable,
    features: &FeatureSet,
) -> Result<Vec<f64>> {
    if policy.min_prob() <= 0.0 {
        return Err(Error::InvalidPolicy("projected Bellman equation needs a completely mixed policy".into()));
    }
    let (h, b) = assemble_hbar_bbar(problem, task, policy, features)?;
    let omega = h
        .clone()
        .lu()
        .solve(&(-&b))
        .ok_or_else(|| Error::Numerical("projected Bellman system is singular".into()))?;
    let residual = (&h * &omega + &b).norm();
    let tol = 1e-9 * b.norm().max(1.0);
    if !(residual <= tol) {
        return Err(Error::Numerical(format!("projected Bellman residual {residual:e} exceeds {tol:e}")));
    }
    Ok(omega.iter().copied().collect())
}

/// Critic parameter `ω`, kept in the ball of radius `B_ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCritic {
    pub omega: Vec<f64>,
    pub radius: f64,
}

impl LinearCritic {
    pub fn zeros(d: usize, radius: f64) -> Self {
        Self { omega: vec![0.0; d], radius }
    }
}

/// Rescales `omega` onto the ball of radius `radius` if it lies outside.
pub fn project_ball(omega: &mut [f64], radius: f64) {
    let norm = omega.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > radius {
        let scale = radius / norm;
        omega.iter_mut().for_each(|x| *x *= scale);
    }
}

/// `ω ← Π(ω + β φ (r + (γ φ′ − φ)ᵀ ω))`.
pub fn projected_td_step(
    critic: &mut LinearCritic,
    phi: &[f64],
    phi_next: &[f64],
    reward: f64,
    gamma: f64,
    beta: f64,
) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidParameter(format!("critic step {beta} outside (0, 1]")));
    }
    let delta = reward
        + phi.iter().zip(phi_next).zip(&critic.omega).map(|((p, q), w)| (gamma * q - p) * w).sum::<f64>();
    critic.omega.iter_mut().zip(phi).for_each(|(w, p)| *w += beta * p * delta);
    project_ball(&mut critic.omega, critic.radius);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfaParams {
    pub iterations: usize,
    pub inner: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub eps_max: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub oracle_value: Option<f64>,
}

impl LfaParams {
    /// Schedules for precision `δ = K^{-1/2}`: `α = α₀ δ √(1−σ₂)/N^{1/4}`,
    /// `β = β₀ δ³/max(ln(1/δ), 1)`, `ε = ε₀ δ`, `η = η₀ δ`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_schedule(
        iterations: usize,
        inner: usize,
        n_agents: usize,
        sigma2: f64,
        alpha0: f64,
        beta0: f64,
        eta0: f64,
        eps0: f64,
        eps_max: f64,
        seed: u64,
    ) -> Self {
        let delta = 1.0 / (iterations as f64).sqrt();
        Self {
            iterations,
            inner,
            alpha: alpha0 * delta * (1.0 - sigma2).sqrt() / (n_agents as f64).powf(0.25),
            beta: beta0 * delta.powi(3) / (1.0 / delta).ln().max(1.0),
            eta: eta0 * delta,
            epsilon: eps0 * delta,
            eps_max,
            seed,
            eval_every: 1,
            oracle_value: None,
        }
    }

    /// `T = ⌈ln(N/δ)/(β ε)⌉`.
    pub fn default_inner(iterations: usize, n_agents: usize, beta: f64, epsilon: f64) -> usize {
        let delta = 1.0 / (iterations as f64).sqrt();
        ((n_agents as f64 / delta).ln().max(1.0) / (beta * epsilon)).ceil() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.inner == 0 {
            return Err(Error::InvalidParameter("K and T must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidParameter(format!("critic step {} outside (0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!("exploration {} outside [0, 1]", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.eta > 0.0 && self.eps_max >= 0.0) {
            return Err(Error::InvalidParameter("need alpha >= 0, eta > 0, eps_max >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LfaOutcome {
    pub agents: AgentsOutcome,
    pub critics: Vec<LinearCritic>,
    pub behaviors: Vec<PolicyTable>,
    pub transitions: usize,
    pub b_omega: f64,
    /// Checked policies whose projected critic missed `Q^π` by more than `ε_max`.
    pub approximation_warnings: usize,
}

struct LinearLearner {
    cursor: SamplerCursor,
    behavior: PolicyTable,
    critic: LinearCritic,
    transitions: usize,
}

fn row(phi: &DMatrix<f64>, i: usize) -> Vec<f64> {
    phi.row(i).iter().copied().collect()
}

/// Runs `steps` projected TD updates along the learner's trajectory.
fn inner_loop(
    problem: &MultiTaskProblem,
    task: usize,
    features: &FeatureSet,
    learner: &mut LinearLearner,
    steps: usize,
    beta: f64,
) -> Result<()> {
    let na = problem.n_actions();
    let phi = features.matrix();
    for _ in 0..steps {
        let t = markov_step(problem, &mut learner.cursor, &learner.behavior);
        let here = row(phi, t.s * na + t.a);
        let next = row(phi, t.next_s * na + t.next_a);
        projected_td_step(&mut learner.critic, &here, &next, problem.reward(task, t.s, t.a), problem.gamma(), beta)?;
        learner.transitions += 1;
    }
    Ok(())
}

/// `‖Φω − Q_task^{π̂}‖∞` for the learner's current critic and behavior.
fn linear_critic_error(problem: &MultiTaskProblem, task: usize, features: &FeatureSet, l: &LinearLearner) -> Result<f64> {
    let exact = evaluate_rewards(problem, problem.rewards(task), &l.behavior)?;
    Ok(features.apply(&l.critic.omega).iter().zip(&exact.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// `‖Φω*(π) − Q^π‖₂` for one task.
pub fn approximation_error(
    problem: &MultiTaskProblem,
    task: usize,
    policy: &PolicyTable,
    features: &FeatureSet,
) -> Result<f64> {
    let omega = solve_projected_bellman(problem, task, policy, features)?;
    let exact = evaluate_rewards(problem, problem.rewards(task), policy)?;
    Ok(features.apply(&omega).iter().zip(&exact.q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// Largest `‖Φω*(π) − Q_i^π‖₂` over `samples` random ε-mixed policies and
/// every task; a suggested `ε_max`.
pub fn measure_eps_max(
    problem: &MultiTaskProblem,
    features: &FeatureSet,
    samples: usize,
    epsilon: f64,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    let errors = map_range(exec, samples, |j| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let logits: Vec<f64> = (0..problem.n_pairs()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let policy = PolicyTable::softmax(problem.n_states(), problem.n_actions(), &logits)?.mix_uniform(epsilon)?;
        (0..problem.n_tasks()).try_fold(0.0_f64, |m, t| Ok(m.max(approximation_error(problem, t, &policy, features)?)))
    });
    errors.into_iter().try_fold(0.0_f64, |m, e| Ok(m.max(e?)))
}

pub fn run_lfa(
    problem: &MultiTaskProblem,
    weights: &WeightMatrix,
    features: &FeatureSet,
    params: &LfaParams,
    exec: Execution,
    rec: &mut Recorder,
) -> Result<LfaOutcome> {
    params.validate()?;
    check_network(problem, weights)?;
    features.check(problem)?;
    if params.inner == 1 {
        log::info!("T = 1: single-loop variant, outside the nested-loop guarantee");
    }
    let n = problem.n_tasks();
    let b_omega = compute_b_omega(features, problem.gamma(), params.eps_max, problem.n_pairs(), problem.r_max());
    let uniform = mix_behavior(&PolicyTable::uniform(problem.n_states(), problem.n_actions()), params.epsilon)?;
    let mut learners: Vec<LinearLearner> = (0..n)
        .map(|i| LinearLearner {
            cursor: SamplerCursor::start(problem, &uniform, params.seed, i as u64),
            behavior: uniform.clone(),
            critic: LinearCritic::zeros(features.dim(), b_omega),
            transitions: 0,
        })
        .collect();
    {
        let h = rec.header_mut();
        h.seed = Some(params.seed);
        h.streams = (0..n as u64).collect();
    }
    let mut thetas = vec![vec![0.0; features.dim()]; n];
    let mut duals = vec![DualState::new(problem.dual_bound()); n];
    let mut max_consensus: f64 = 0.0;
    let mut warnings = 0;
    let mut policies = Vec::new();
    for k in 0..=params.iterations {
        policies = map_range(exec, n, |i| loglinear_policy(problem, features, &thetas[i]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let consensus = consensus_error(&thetas);
        max_consensus = max_consensus.max(consensus);
        if should_record(k, params.iterations, params.eval_every) {
            let errors = map_range(exec, n, |i| linear_critic_error(problem, i, features, &learners[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let approx = map_range(exec, n, |i| approximation_error(problem, i, &learners[i].behavior, features));
            for e in approx {
                let e = e?;
                if e > params.eps_max + 1e-9 * problem.value_bound() {
                    if warnings == 0 {
                        log::warn!("iteration {k}: approximation error {e} exceeds eps_max {}", params.eps_max);
                    }
                    warnings += 1;
                }
            }
            record_iteration(problem, k, &policies, consensus, &duals, Some(&errors), params.oracle_value, exec, rec)?;
        }
        if k == params.iterations {
            break;
        }
        let mut failures: Vec<Option<Error>> = (0..n).map(|_| None).collect();
        let mut work: Vec<_> = learners.iter_mut().zip(failures.iter_mut()).collect();
        for_each_mut(exec, &mut work, |i, (learner, fail)| {
            if let Err(e) = inner_loop(problem, i, features, learner, params.inner, params.beta) {
                **fail = Some(e);
            }
        });
        if let Some(e) = failures.into_iter().flatten().next() {
            return Err(e);
        }
        let directions: Vec<Vec<f64>> = learners.iter().map(|l| l.critic.omega.clone()).collect();
        thetas = npg_actor_step(&thetas, weights, &directions, &duals, params.alpha, exec)?;
        if thetas.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("policy parameters diverged at iteration {}", k + 1)));
        }
        let next = map_range(exec, n, |i| {
            loglinear_policy(problem, features, &thetas[i]).and_then(|p| mix_behavior(&p, params.epsilon))
        });
        for (learner, b) in learners.iter_mut().zip(next) {
            learner.behavior = b?;
        }
        for (i, learner) in learners.iter().enumerate() {
            let q = features.apply(&learner.critic.omega);
            duals[i] = ac_dual_step(
                duals[i],
                problem.rho(),
                &policies[i],
                &q,
                problem.lower()[i],
                problem.upper()[i],
                params.eta,
            );
        }
    }
    if warnings > 1 {
        log::warn!("{warnings} evaluations exceeded eps_max {}", params.eps_max);
    }
    Ok(LfaOutcome {
        transitions: learners.iter().map(|l| l.transitions).sum(),
        behaviors: learners.iter().map(|l| l.behavior.clone()).collect(),
        critics: learners.into_iter().map(|l| l.critic).collect(),
        agents: AgentsOutcome { thetas, policies, duals, max_consensus_error: max_consensus },
        b_omega,
        approximation_warnings: warnings,
    })
}

pub fn lfa_trace(
    problem: &MultiTaskProblem,
    weights: &WeightMatrix,
    features: &FeatureSet,
    params: &LfaParams,
    exec: Execution,
) -> Result<(MetricsTrace, Option<LfaOutcome>)> {
    let mut header = base_header("lfa", problem, problem.n_tasks(), weights.sigma2());
    let b_omega = compute_b_omega(features, problem.gamma(), params.eps_max, problem.n_pairs(), problem.r_max());
    header.extra.push(("b_omega".into(), format!("{b_omega:.16e}")));
    header.extra.push(("inner_steps".into(), params.inner.to_string()));
    let mut rec = Recorder::new(header);
    match run_lfa(problem, weights, features, params, exec, &mut rec) {
        Ok(out) => Ok((rec.finish()?, Some(out))),
        Err(e @ Error::Numerical(_)) => Ok((rec.fail(&e.to_string())?, None)),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::{lazy_metropolis, CommGraph};
    use crate::eval::policy_evaluation;

    fn problem(seed: u64) -> MultiTaskProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiTaskProblem::random(&mut rng, 4, 3, 2, 0.5).unwrap()
    }

    fn mixed_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize, eps: f64) -> PolicyTable {
        let logits: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-3.0..3.0)).collect();
        PolicyTable::softmax(ns, na, &logits).unwrap().mix_uniform(eps).unwrap()
    }

    #[test]
    fn b_omega_examples() {
        let id = FeatureSet::identity(4);
        let base = compute_b_omega(&id, 0.5, 0.0, 4, 1.0);
        assert!((base - 8f64.sqrt()).abs() < 1e-15);
        assert!((compute_b_omega(&id, 0.5, 1.0, 4, 1.0) - base - 1.0).abs() < 1e-15);
        let half = FeatureSet::new(DMatrix::identity(4, 4) * 0.5).unwrap();
        assert!((compute_b_omega(&half, 0.5, 0.0, 4, 1.0) - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn feature_presets() {
        let tiles = FeatureSet::tiles(5, 2, 2).unwrap();
        assert_eq!(tiles.dim(), 6);
        assert_eq!(tiles.matrix()[(4 * 2 + 1, 2 * 2 + 1)], 1.0);
        let random = FeatureSet::random(12, 5, 3).unwrap();
        assert!(random.matrix().row_iter().all(|r| r.norm() <= 1.0 + 1e-12));
        assert!((random.sigma_min() - 1.0).abs() < 1e-10);
        assert!(FeatureSet::new(DMatrix::from_element(4, 2, 0.5)).is_err());
        assert!(FeatureSet::new(DMatrix::identity(3, 3) * 2.0).is_err());

        assert_eq!("tiles:3".parse::<FeatureSpec>(), Ok(FeatureSpec::Tiles(3)));
        assert_eq!("identity".parse::<FeatureSpec>(), Ok(FeatureSpec::Identity));
        assert!("random:x".parse::<FeatureSpec>().is_err());
        let json = serde_json::to_string(&FeatureSpec::Random(4)).unwrap();
        assert_eq!(json, "\"random:4\"");
    }

    #[test]
    fn loglinear_examples() {
        let p = problem(0);
        let id = FeatureSet::identity(12);
        assert_eq!(loglinear_policy(&p, &id, &[0.0; 12]).unwrap(), PolicyTable::uniform(4, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta: Vec<f64> = (0..12).map(|_| rng.random_range(-4.0..4.0)).collect();
        let a = loglinear_policy(&p, &id, &theta).unwrap();
        let b = PolicyTable::softmax(4, 3, &theta).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() < 1e-12));

        // one feature that only depends on the state
        let per_state = FeatureSet::new(DMatrix::from_fn(12, 1, |i, _| 0.2 * (i / 3) as f64 + 0.1)).unwrap();
        let pi = loglinear_policy(&p, &per_state, &[7.5]).unwrap();
        assert!(pi.as_slice().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(loglinear_policy(&p, &id, &[f64::NAN; 12]).is_err());
    }

    #[test]
    fn stationary_examples() {
        let half = DMatrix::from_element(2, 2, 0.5);
        assert_eq!(stationary_of_kernel(&half).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(stationary_of_kernel(&DMatrix::identity(3, 3)), Err(Error::NoStationaryDistribution(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut k = DMatrix::from_fn(4, 4, |_, _| rng.random_range(0.05..1.0));
        for mut row in k.row_iter_mut() {
            let z = row.sum();
            row /= z;
        }
        let mu = stationary_of_kernel(&k).unwrap();
        let mut x = nalgebra::RowDVector::from_element(4, 0.25);
        for _ in 0..10_000 {
            x = &x * &k;
        }
        assert!(mu.iter().zip(x.iter()).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    fn explicit_h_b(p: &MultiTaskProblem, task: usize, pi: &PolicyTable, f: &FeatureSet) -> (DMatrix<f64>, DVector<f64>) {
        let mu = stationary_distribution(p, pi).unwrap();
        let (ns, na, d) = (p.n_states(), p.n_actions(), f.dim());
        let phi = f.matrix();
        let mut h = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        for s in 0..ns {
            for a in 0..na {
                let w = mu[s] * pi.prob(s, a);
                let i = s * na + a;
                for s2 in 0..ns {
                    for a2 in 0..na {
                        let pr = p.next_dist(s, a)[s2] * pi.prob(s2, a2);
                        for x in 0..d {
                            for y in 0..d {
                                h[(x, y)] += w * pr * phi[(i, x)] * p.gamma() * phi[(s2 * na + a2, y)];
                            }
                        }
                    }
                }
                for x in 0..d {
                    for y in 0..d {
                        h[(x, y)] -= w * phi[(i, x)] * phi[(i, y)];
                    }
                    b[x] += w * p.reward(task, s, a) * phi[(i, x)];
                }
            }
        }
        (h, b)
    }

    #[test]
    fn assembly_matches_explicit_summation() {
        let p = problem(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for features in [FeatureSet::identity(12), FeatureSet::random(12, 5, 9).unwrap()] {
            let pi = mixed_policy(&mut rng, 4, 3, 0.3);
            let (h, b) = assemble_hbar_bbar(&p, 1, &pi, &features).unwrap();
            let (h2, b2) = explicit_h_b(&p, 1, &pi, &features);
            assert!((h - h2).amax() < 1e-12 && (b - b2).amax() < 1e-12);
        }
    }

    #[test]
    fn myopic_identity_features_give_minus_occupancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MultiTaskProblem::random(&mut rng, 3, 2, 1, 1e-300).unwrap();
        let myopic = MultiTaskProblem::new_unchecked(
            3,
            2,
            p.transition().to_vec(),
            vec![p.rewards(0).to_vec()],
            0.0,
            p.rho().to_vec(),
            vec![f64::NEG_INFINITY],
            vec![f64::INFINITY],
            1.0,
        );
        let pi = mixed_policy(&mut rng, 3, 2, 0.2);
        let (h, _) = assemble_hbar_bbar(&myopic, 0, &pi, &FeatureSet::identity(6)).unwrap();
        let mu = stationary_distribution(&myopic, &pi).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { -mu[i / 2] * pi.as_slice()[i] } else { 0.0 };
                assert!((h[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_features_recover_exact_q() {
        let p = problem(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let pi = mixed_policy(&mut rng, 4, 3, 0.1);
            let omega = solve_projected_bellman(&p, 0, &pi, &FeatureSet::identity(12)).unwrap();
            let q = policy_evaluation(&p, 0, &pi).unwrap().q;
            assert!(omega.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-8));
        }
        let greedy = PolicyTable::deterministic(3, &[0, 1, 2, 0]).unwrap();
        assert!(solve_projected_bellman(&p, 0, &greedy, &FeatureSet::identity(12)).is_err());
    }

    #[test]
    fn single_constant_feature_has_scalar_solution() {
        let p = problem(8);
        let n = 12.0f64;
        let features = FeatureSet::new(DMatrix::from_element(12, 1, 1.0 / n.sqrt())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pi = mixed_policy(&mut rng, 4, 3, 0.5);
        let omega = solve_projected_bellman(&p, 0, &pi, &features).unwrap();
        let mu = stationary_distribution(&p, &pi).unwrap();
        let mean_reward: f64 = (0..12).map(|i| mu[i / 3] * pi.as_slice()[i] * p.rewards(0)[i]).sum();
        // H = (γ − 1)/n, b = mean_reward/√n
        let expected = n.sqrt() * mean_reward / (1.0 - p.gamma());
        assert!((omega[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn projected_solution_inside_ball_with_measured_error() {
        let p = problem(10);
        let features = FeatureSet::random(12, 6, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let pi = mixed_policy(&mut rng, 4, 3, 0.2);
            let eps = approximation_error(&p, 0, &pi, &features).unwrap();
            let omega = solve_projected_bellman(&p, 0, &pi, &features).unwrap();
            let radius = compute_b_omega(&features, p.gamma(), eps, 12, p.r_max());
            assert!(omega.iter().map(|x| x * x).sum::<f64>().sqrt() <= radius);
        }
    }

    #[test]
    fn td_step_examples() {
        let mut c = LinearCritic::zeros(2, 1.0);
        projected_td_step(&mut c, &[0.6, 0.8], &[1.0, 0.0], 0.0, 0.9, 0.5).unwrap();
        assert_eq!(c.omega, vec![0.0, 0.0]);

        let mut c = LinearCritic { omega: vec![0.0, 0.0], radius: 2.0 };
        // ω̂ = β φ r = (4, 0): twice the radius
        projected_td_step(&mut c, &[1.0, 0.0], &[0.0, 0.0], 8.0, 0.9, 0.5).unwrap();
        assert!((c.omega[0] - 2.0).abs() < 1e-15 && c.omega[1] == 0.0);
        assert!(projected_td_step(&mut c, &[1.0, 0.0], &[0.0, 0.0], 1.0, 0.9, 1.5).is_err());
    }

    #[test]
    fn stationary_samples_have_zero_mean_drift_at_the_fixed_point() {
        let p = problem(13);
        let features = FeatureSet::random(12, 4, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pi = mixed_policy(&mut rng, 4, 3, 0.3);
        let omega = solve_projected_bellman(&p, 0, &pi, &features).unwrap();
        let mu = stationary_distribution(&p, &pi).unwrap();
        let weights: Vec<f64> = (0..12).map(|i| mu[i / 3] * pi.as_slice()[i]).collect();
        let pick = |rng: &mut ChaCha8Rng, probs: &[f64]| {
            let u: f64 = rng.random();
            let mut c = 0.0;
            probs.iter().position(|p| {
                c += p;
                u < c
            })
            .unwrap_or(probs.len() - 1)
        };
        let phi = features.matrix();
        let samples = 100_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..samples {
            let i = pick(&mut rng, &weights);
            let (s, a) = (i / 3, i % 3);
            let s2 = pick(&mut rng, p.next_dist(s, a));
            let a2 = pick(&mut rng, pi.row(s2));
            let j = s2 * 3 + a2;
            let delta = p.reward(0, s, a)
                + (0..4).map(|x| (p.gamma() * phi[(j, x)] - phi[(i, x)]) * omega[x]).sum::<f64>();
            for x in 0..4 {
                let g = phi[(i, x)] * delta;
                sum[x] += g;
                sq[x] += g * g;
            }
        }
        for x in 0..4 {
            let mean = sum[x] / samples as f64;
            let var = sq[x] / samples as f64 - mean * mean;
            let stderr = (var / samples as f64).sqrt();
            assert!(mean.abs() <= 3.0 * stderr, "component {x}: {mean} vs {stderr}");
        }
    }

    #[test]
    fn run_budget_single_loop_and_determinism() {
        let p = problem(16).with_bounds(vec![0.9, f64::NEG_INFINITY], vec![f64::INFINITY, 1.2]).unwrap();
        let w = lazy_metropolis(&CommGraph::complete(2).unwrap()).unwrap();
        let features = FeatureSet::tiles(4, 3, 2).unwrap();
        for inner in [1, 50] {
            let mut params = LfaParams::with_schedule(40, inner, 2, w.sigma2(), 1.0, 1.0, 1.0, 1.0, 0.5, 3);
            params.beta = 0.05;
            params.eval_every = 10;
            let (t1, out) = lfa_trace(&p, &w, &features, &params, Execution::Parallel).unwrap();
            let out = out.unwrap();
            assert_eq!(out.transitions, 2 * 40 * inner);
            assert!(out.critics.iter().all(|c| c.omega.iter().map(|x| x * x).sum::<f64>().sqrt() <= out.b_omega + 1e-12));
            let (t2, _) = lfa_trace(&p, &w, &features, &params, Execution::Sequential).unwrap();
            assert_eq!(t1.to_csv_string(), t2.to_csv_string());
            assert_eq!(t1.header.extra("inner_steps"), Some(inner.to_string().as_str()));
        }
    }
}
