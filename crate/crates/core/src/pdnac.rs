//! Online single-trajectory primal-dual natural actor-critic with a tabular
//! TD(0) critic and ε-mixed behavior policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::{consensus_error, WeightMatrix};
use crate::error::{Error, Result};
use crate::eval::evaluate_rewards;
use crate::exec::{for_each_mut, map_range, Execution};
use crate::metrics::{MetricsTrace, Recorder};
use crate::pdnpg::{
    base_header, central_actor_step, check_network, dual_step, npg_actor_step, record_iteration, should_record,
    softmax_policy, AgentsOutcome, DualState, Mode,
};
use crate::policy::PolicyTable;
use crate::problem::MultiTaskProblem;

/// Tabular critic `Q̂(s, a)`, flattened `s * |A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTable {
    pub q: Vec<f64>,
}

impl CriticTable {
    pub fn zeros(n_pairs: usize) -> Self {
        Self { q: vec![0.0; n_pairs] }
    }
}

/// One agent's position on its trajectory and its private random stream.
#[derive(Debug, Clone)]
pub struct SamplerCursor {
    pub s: usize,
    pub a: usize,
    stream: u64,
    rng: ChaCha8Rng,
}

/// `(s, a) → (s′, a′)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub next_s: usize,
    pub next_a: usize,
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // rounding left u above the final partial sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl SamplerCursor {
    /// Draws `s ∼ ρ` and `a ∼ behavior(·|s)` from stream `stream` of `seed`.
    pub fn start(problem: &MultiTaskProblem, behavior: &PolicyTable, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let s = sample_index(&mut rng, problem.rho());
        let a = sample_index(&mut rng, behavior.row(s));
        Self { s, a, stream, rng }
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

/// `ε/|A| + (1 − ε) π`.
pub fn mix_behavior(policy: &PolicyTable, epsilon: f64) -> Result<PolicyTable> {
    policy.mix_uniform(epsilon)
}

/// Samples `s′ ∼ P(·|s, a)` and `a′ ∼ behavior(·|s′)` by inverse CDF and
/// advances the cursor.
pub fn markov_step(problem: &MultiTaskProblem, cursor: &mut SamplerCursor, behavior: &PolicyTable) -> Transition {
    let (s, a) = (cursor.s, cursor.a);
    let next_s = sample_index(&mut cursor.rng, problem.next_dist(s, a));
    let next_a = sample_index(&mut cursor.rng, behavior.row(next_s));
    cursor.s = next_s;
    cursor.a = next_a;
    Transition { s, a, next_s, next_a }
}

/// `Q̂(s,a) ← (1 − β) Q̂(s,a) + β (r + γ Q̂(s′,a′))`.
pub fn td0_update(
    critic: &mut CriticTable,
    t: &Transition,
    reward: f64,
    gamma: f64,
    n_actions: usize,
    beta: f64,
) -> Result<()> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidParameter(format!("critic step {beta} outside (0, 1]")));
    }
    let i = t.s * n_actions + t.a;
    let target = reward + gamma * critic.q[t.next_s * n_actions + t.next_a];
    critic.q[i] = (1.0 - beta) * critic.q[i] + beta * target;
    Ok(())
}

/// `Σ_{s,a} ρ(s) π(a|s) Q̂(s,a)`.
pub fn critic_value(rho: &[f64], policy: &PolicyTable, q: &[f64]) -> f64 {
    let na = policy.n_actions();
    rho.iter()
        .enumerate()
        .map(|(s, r)| r * (0..na).map(|a| policy.prob(s, a) * q[s * na + a]).sum::<f64>())
        .sum()
}

/// Dual step driven by the critic's estimate of `Vᵢ(ρ)` under `policy`.
pub fn ac_dual_step(
    dual: DualState,
    rho: &[f64],
    policy: &PolicyTable,
    q: &[f64],
    lower: f64,
    upper: f64,
    eta: f64,
) -> DualState {
    dual_step(dual, critic_value(rho, policy, q), lower, upper, eta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdnacParams {
    pub iterations: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub mode: Mode,
    pub seed: u64,
    pub eval_every: usize,
    pub oracle_value: Option<f64>,
}

impl PdnacParams {
    /// `α = α₀/K^{5/6}`, `β = β₀/K^{1/2}`, `η = η₀/K^{5/6}`, `ε = ε₀/K^{1/6}`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_schedule(iterations: usize, alpha0: f64, beta0: f64, eta0: f64, eps0: f64, mode: Mode, seed: u64) -> Self {
        let k = iterations as f64;
        Self {
            iterations,
            alpha: alpha0 / k.powf(5.0 / 6.0),
            beta: beta0 / k.sqrt(),
            eta: eta0 / k.powf(5.0 / 6.0),
            epsilon: eps0 / k.powf(1.0 / 6.0),
            mode,
            seed,
            eval_every: 1,
            oracle_value: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidParameter(format!("critic step {} outside (0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!("exploration {} outside [0, 1]", self.epsilon)));
        }
        if !(self.alpha >= 0.0 && self.eta > 0.0) {
            return Err(Error::InvalidParameter("step sizes must satisfy alpha >= 0, eta > 0".into()));
        }
        Ok(())
    }
}

/// Whether `(1 − γ) μ̲ ε₀ β₀ / |A| ≤ 1`; logs a warning when it fails.
pub fn check_step_premise(problem: &MultiTaskProblem, mu_lower: f64, eps0: f64, beta0: f64) -> bool {
    let lhs = (1.0 - problem.gamma()) * mu_lower * eps0 * beta0 / problem.n_actions() as f64;
    let ok = lhs <= 1.0;
    if !ok {
        log::warn!("step-size premise (1-gamma)*mu*eps0*beta0/|A| = {lhs} exceeds 1");
    }
    ok
}

/// One learner: its trajectory, behavior policy and one critic per task it
/// serves (one in the network, all of them for the central server).
#[derive(Debug, Clone)]
struct Learner {
    cursor: SamplerCursor,
    behavior: PolicyTable,
    tasks: Vec<usize>,
    critics: Vec<CriticTable>,
    transitions: usize,
}

#[derive(Debug, Clone)]
pub struct PdnacOutcome {
    pub agents: AgentsOutcome,
    /// Critic of task `i` is `critics[i]`.
    pub critics: Vec<CriticTable>,
    pub behaviors: Vec<PolicyTable>,
    pub transitions: usize,
}

fn learners(problem: &MultiTaskProblem, mode: Mode, epsilon: f64, seed: u64) -> Result<Vec<Learner>> {
    let n = problem.n_tasks();
    let behavior = mix_behavior(&PolicyTable::uniform(problem.n_states(), problem.n_actions()), epsilon)?;
    let groups: Vec<Vec<usize>> = match mode {
        Mode::Central => vec![(0..n).collect()],
        Mode::Decentral => (0..n).map(|i| vec![i]).collect(),
    };
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(j, tasks)| Learner {
            cursor: SamplerCursor::start(problem, &behavior, seed, j as u64),
            behavior: behavior.clone(),
            critics: vec![CriticTable::zeros(problem.n_pairs()); tasks.len()],
            tasks,
            transitions: 0,
        })
        .collect())
}

/// `maxᵢ ‖Q̂ᵢ − Q_i^{π̂}‖∞` over the tasks a learner serves.
fn critic_error(problem: &MultiTaskProblem, learner: &Learner) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (task, critic) in learner.tasks.iter().zip(&learner.critics) {
        let exact = evaluate_rewards(problem, problem.rewards(*task), &learner.behavior)?;
        worst = critic.q.iter().zip(&exact.q).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

pub fn run_pdnac(
    problem: &MultiTaskProblem,
    weights: &WeightMatrix,
    params: &PdnacParams,
    exec: Execution,
    rec: &mut Recorder,
) -> Result<PdnacOutcome> {
    params.validate()?;
    if params.mode == Mode::Decentral {
        check_network(problem, weights)?;
    }
    let n = problem.n_tasks();
    let (na, gamma) = (problem.n_actions(), problem.gamma());
    let mut learners = learners(problem, params.mode, params.epsilon, params.seed)?;
    let agents = learners.len();
    rec.header_mut().seed = Some(params.seed);
    rec.header_mut().streams = learners.iter().map(|l| l.cursor.stream()).collect();
    let mut thetas = vec![vec![0.0; problem.n_pairs()]; agents];
    let mut duals = vec![DualState::new(problem.dual_bound()); n];
    let mut max_consensus: f64 = 0.0;
    let mut policies: Vec<PolicyTable> = learners.iter().map(|l| l.behavior.clone()).collect();
    for k in 0..=params.iterations {
        policies = map_range(exec, agents, |i| softmax_policy(problem, &thetas[i])).into_iter().collect::<Result<_>>()?;
        let consensus = consensus_error(&thetas);
        max_consensus = max_consensus.max(consensus);
        if should_record(k, params.iterations, params.eval_every) {
            let errors = map_range(exec, agents, |i| critic_error(problem, &learners[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            record_iteration(problem, k, &policies, consensus, &duals, Some(&errors), params.oracle_value, exec, rec)?;
        }
        if k == params.iterations {
            break;
        }
        // observe, then critic; the actor direction is the critic before this step
        let mut directions: Vec<Vec<Vec<f64>>> = vec![Vec::new(); agents];
        let mut failures: Vec<Option<Error>> = (0..agents).map(|_| None).collect();
        let mut work: Vec<_> = learners.iter_mut().zip(directions.iter_mut()).zip(failures.iter_mut()).collect();
        for_each_mut(exec, &mut work, |_, ((learner, dir), fail)| {
            let t = markov_step(problem, &mut learner.cursor, &learner.behavior);
            learner.transitions += 1;
            **dir = learner.critics.iter().map(|c| c.q.clone()).collect();
            for (task, critic) in learner.tasks.iter().zip(learner.critics.iter_mut()) {
                if let Err(e) = td0_update(critic, &t, problem.reward(*task, t.s, t.a), gamma, na, params.beta) {
                    **fail = Some(e);
                }
            }
        });
        if let Some(e) = failures.into_iter().flatten().next() {
            return Err(e);
        }
        thetas = match params.mode {
            Mode::Central => vec![central_actor_step(&thetas[0], &directions[0], &duals, params.alpha)],
            Mode::Decentral => {
                let flat: Vec<Vec<f64>> = directions.into_iter().map(|mut d| d.remove(0)).collect();
                npg_actor_step(&thetas, weights, &flat, &duals, params.alpha, exec)?
            }
        };
        if thetas.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("policy parameters diverged at iteration {}", k + 1)));
        }
        let next_behavior = map_range(exec, agents, |i| {
            softmax_policy(problem, &thetas[i]).and_then(|p| mix_behavior(&p, params.epsilon))
        });
        for (learner, b) in learners.iter_mut().zip(next_behavior) {
            learner.behavior = b?;
        }
        for (j, learner) in learners.iter().enumerate() {
            for (task, critic) in learner.tasks.iter().zip(&learner.critics) {
                duals[*task] = ac_dual_step(
                    duals[*task],
                    problem.rho(),
                    &policies[j],
                    &critic.q,
                    problem.lower()[*task],
                    problem.upper()[*task],
                    params.eta,
                );
            }
        }
    }
    let mut critics = vec![CriticTable::zeros(0); n];
    for learner in &learners {
        for (task, critic) in learner.tasks.iter().zip(&learner.critics) {
            critics[*task] = critic.clone();
        }
    }
    Ok(PdnacOutcome {
        transitions: learners.iter().map(|l| l.transitions).sum(),
        behaviors: learners.iter().map(|l| l.behavior.clone()).collect(),
        agents: AgentsOutcome { thetas, policies, duals, max_consensus_error: max_consensus },
        critics,
    })
}

pub fn pdnac_trace(
    problem: &MultiTaskProblem,
    weights: &WeightMatrix,
    params: &PdnacParams,
    exec: Execution,
) -> Result<(MetricsTrace, Option<PdnacOutcome>)> {
    let (agents, sigma2) = match params.mode {
        Mode::Central => (1, 0.0),
        Mode::Decentral => (problem.n_tasks(), weights.sigma2()),
    };
    let mut rec = Recorder::new(base_header("pdnac", problem, agents, sigma2));
    match run_pdnac(problem, weights, params, exec, &mut rec) {
        Ok(out) => Ok((rec.finish()?, Some(out))),
        Err(e @ Error::Numerical(_)) => Ok((rec.fail(&e.to_string())?, None)),
        Err(e) => Err(e),
    }
}

/// TD(0) under a fixed behavior policy for `steps` transitions of one
/// trajectory started from `ρ`.
pub fn td0_evaluate(
    problem: &MultiTaskProblem,
    task: usize,
    behavior: &PolicyTable,
    beta: f64,
    steps: usize,
    seed: u64,
) -> Result<CriticTable> {
    let mut cursor = SamplerCursor::start(problem, behavior, seed, 0);
    let mut critic = CriticTable::zeros(problem.n_pairs());
    for _ in 0..steps {
        let t = markov_step(problem, &mut cursor, behavior);
        td0_update(&mut critic, &t, problem.reward(task, t.s, t.a), problem.gamma(), problem.n_actions(), beta)?;
    }
    Ok(critic)
}
