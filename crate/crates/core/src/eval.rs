//! Exact evaluation: linear-solve policy evaluation and the quantities
//! built on it (task values, Lagrangian, constraint violation, discounted
//! visitation) plus greedy rollouts.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::policy::PolicyTable;
use crate::problem::MultiTaskProblem;

/// `V`, `Q`, advantage and `V(ρ)` of one task under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBundle {
    pub v: Vec<f64>,
    /// Flattened `s * |A| + a`.
    pub q: Vec<f64>,
    pub advantage: Vec<f64>,
    pub v_rho: f64,
}

impl ValueBundle {
    /// Writes `s,a,Q,A` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W, n_actions: usize) -> std::io::Result<()> {
        writeln!(out, "s,a,Q,A")?;
        for (i, (q, adv)) in self.q.iter().zip(&self.advantage).enumerate() {
            writeln!(out, "{},{},{:.16e},{:.16e}", i / n_actions, i % n_actions, q, adv)?;
        }
        Ok(())
    }
}

fn check_policy(problem: &MultiTaskProblem, policy: &PolicyTable) -> Result<()> {
    if policy.n_states() != problem.n_states() || policy.n_actions() != problem.n_actions() {
        return Err(Error::DimensionMismatch(format!(
            "policy is {}x{}, problem is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            problem.n_states(),
            problem.n_actions()
        )));
    }
    Ok(())
}

/// State-to-state kernel `P^π` as a dense matrix.
pub fn induced_kernel(problem: &MultiTaskProblem, policy: &PolicyTable) -> DMatrix<f64> {
    let ns = problem.n_states();
    let mut p = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..problem.n_actions() {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            for (t, pt) in problem.next_dist(s, a).iter().enumerate() {
                p[(s, t)] += w * pt;
            }
        }
    }
    p
}

/// Evaluates an arbitrary `|S|·|A|` reward table under `policy`.
pub fn evaluate_rewards(
    problem: &MultiTaskProblem,
    rewards: &[f64],
    policy: &PolicyTable,
) -> Result<ValueBundle> {
    check_policy(problem, policy)?;
    let (ns, na) = (problem.n_states(), problem.n_actions());
    let gamma = problem.gamma();
    let p_pi = induced_kernel(problem, policy);
    let r_pi = DVector::from_fn(ns, |s, _| (0..na).map(|a| policy.prob(s, a) * rewards[s * na + a]).sum());
    let system = DMatrix::identity(ns, ns) - &p_pi * gamma;
    let v = system
        .clone()
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::Numerical("policy evaluation system is singular".into()))?;
    let residual = (&system * &v - &r_pi).amax();
    let r_max = rewards.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    let tol = 1e-9 * r_max.max(1.0);
    if !(residual <= tol) {
        return Err(Error::Numerical(format!("evaluation residual {residual:e} exceeds {tol:e}")));
    }
    let v: Vec<f64> = v.iter().copied().collect();
    let mut q = vec![0.0; ns * na];
    let mut advantage = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let next: f64 = problem.next_dist(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
            let i = s * na + a;
            q[i] = rewards[i] + gamma * next;
            advantage[i] = q[i] - v[s];
        }
    }
    let v_rho = problem.rho().iter().zip(&v).map(|(r, x)| r * x).sum();
    Ok(ValueBundle { v, q, advantage, v_rho })
}

pub fn policy_evaluation(
    problem: &MultiTaskProblem,
    task: usize,
    policy: &PolicyTable,
) -> Result<ValueBundle> {
    if task >= problem.n_tasks() {
        return Err(Error::DimensionMismatch(format!("task {task} out of range")));
    }
    evaluate_rewards(problem, problem.rewards(task), policy)
}

/// `V_i(ρ)` for every task.
pub fn task_values(problem: &MultiTaskProblem, policy: &PolicyTable) -> Result<Vec<f64>> {
    check_policy(problem, policy)?;
    let (ns, na, nt) = (problem.n_states(), problem.n_actions(), problem.n_tasks());
    let system = DMatrix::identity(ns, ns) - induced_kernel(problem, policy) * problem.gamma();
    let rhs = DMatrix::from_fn(ns, nt, |s, t| {
        let r = problem.rewards(t);
        (0..na).map(|a| policy.prob(s, a) * r[s * na + a]).sum()
    });
    let v = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("policy evaluation system is singular".into()))?;
    Ok((0..nt)
        .map(|t| problem.rho().iter().enumerate().map(|(s, r)| r * v[(s, t)]).sum())
        .collect())
}

/// Mean of the per-task values, `V₀(ρ)`.
pub fn average_value(problem: &MultiTaskProblem, policy: &PolicyTable) -> Result<f64> {
    let values = task_values(problem, policy)?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `Σᵢ ([ℓᵢ − Vᵢ]₊ + [Vᵢ − uᵢ]₊)`. Infinite bounds never contribute.
pub fn violation_from_values(values: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    values
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (l, u))| (l - v).max(0.0) + (v - u).max(0.0))
        .sum()
}

pub fn constraint_violation(problem: &MultiTaskProblem, policy: &PolicyTable) -> Result<f64> {
    let values = task_values(problem, policy)?;
    Ok(violation_from_values(&values, problem.lower(), problem.upper()))
}

/// `V₀ + Σᵢ (λᵢ (Vᵢ − ℓᵢ) − νᵢ (Vᵢ − uᵢ))`; terms with an infinite bound
/// are skipped since their multiplier is pinned to zero.
pub fn lagrangian_from_values(
    values: &[f64],
    lower: &[f64],
    upper: &[f64],
    lambda: &[f64],
    nu: &[f64],
) -> Result<f64> {
    if lambda.iter().chain(nu).any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidParameter("dual variables must be nonnegative".into()));
    }
    let n = values.len();
    if [lower.len(), upper.len(), lambda.len(), nu.len()].iter().any(|&l| l != n) {
        return Err(Error::DimensionMismatch("one bound and one multiplier per task".into()));
    }
    let mut total = values.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        if lower[i].is_finite() {
            total += lambda[i] * (values[i] - lower[i]);
        }
        if upper[i].is_finite() {
            total -= nu[i] * (values[i] - upper[i]);
        }
    }
    Ok(total)
}

pub fn lagrangian_value(
    problem: &MultiTaskProblem,
    policy: &PolicyTable,
    lambda: &[f64],
    nu: &[f64],
) -> Result<f64> {
    let values = task_values(problem, policy)?;
    lagrangian_from_values(&values, problem.lower(), problem.upper(), lambda, nu)
}

/// Normalized discounted state visitation `d_ρ^π`, solving
/// `(I − γ (P^π)ᵀ) d = (1 − γ) ρ`.
pub fn discounted_visitation(problem: &MultiTaskProblem, policy: &PolicyTable) -> Result<Vec<f64>> {
    check_policy(problem, policy)?;
    let ns = problem.n_states();
    let gamma = problem.gamma();
    let system = DMatrix::identity(ns, ns) - induced_kernel(problem, policy).transpose() * gamma;
    let rhs = DVector::from_iterator(ns, problem.rho().iter().map(|r| (1.0 - gamma) * r));
    let d = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("visitation system is singular".into()))?;
    Ok(d.iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rollout {
    /// Visited states, starting with the start state.
    pub path: Vec<usize>,
    /// Ended in an absorbing state.
    pub absorbed: bool,
    /// A state repeated before absorption.
    pub cycle: bool,
}

fn is_absorbing(problem: &MultiTaskProblem, s: usize) -> bool {
    (0..problem.n_actions()).all(|a| problem.next_dist(s, a)[s] == 1.0)
}

/// Follows `argmax_a π(a|s)` from `start` through deterministic dynamics
/// until an absorbing state, a repeated state, or `max_steps` moves.
pub fn greedy_rollout(
    problem: &MultiTaskProblem,
    policy: &PolicyTable,
    start: usize,
    max_steps: usize,
) -> Result<Rollout> {
    check_policy(problem, policy)?;
    let mut path = vec![start];
    let mut seen = vec![false; problem.n_states()];
    seen[start] = true;
    let mut s = start;
    for _ in 0..max_steps {
        if is_absorbing(problem, s) {
            return Ok(Rollout { path, absorbed: true, cycle: false });
        }
        let a = policy.greedy_action(s);
        let row = problem.next_dist(s, a);
        let next = row
            .iter()
            .position(|p| *p == 1.0)
            .ok_or_else(|| Error::InvalidParameter(format!("dynamics at (s={s}, a={a}) are not deterministic")))?;
        path.push(next);
        if seen[next] {
            return Ok(Rollout { path, absorbed: false, cycle: true });
        }
        seen[next] = true;
        s = next;
    }
    let absorbed = is_absorbing(problem, s);
    Ok(Rollout { path, absorbed, cycle: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::{build_gridworld, Bounds, MazeSpec};
    use crate::problem::fixtures::single_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> PolicyTable {
        let logits: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-2.0..2.0)).collect();
        PolicyTable::softmax(ns, na, &logits).unwrap()
    }

    #[test]
    fn geometric_series() {
        let p = single_state(1.0, 0.9);
        let b = policy_evaluation(&p, 0, &PolicyTable::uniform(1, 1)).unwrap();
        assert!((b.v[0] - 10.0).abs() < 1e-12);
        assert!((b.q[0] - 10.0).abs() < 1e-12);
        assert!(b.advantage[0].abs() < 1e-12);
        assert!((b.v_rho - 10.0).abs() < 1e-12);
    }

    #[test]
    fn two_state_chain_by_hand() {
        let p = MultiTaskProblem::new(
            2,
            1,
            vec![0.0, 1.0, 0.0, 1.0],
            vec![vec![0.0, 1.0]],
            0.5,
            vec![1.0, 0.0],
            vec![f64::NEG_INFINITY],
            vec![f64::INFINITY],
            1.0,
        )
        .unwrap();
        let b = policy_evaluation(&p, 0, &PolicyTable::uniform(2, 1)).unwrap();
        assert!((b.v[1] - 2.0).abs() < 1e-12);
        assert!((b.v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corridor_matches_hand_recursion() {
        let spec = MazeSpec {
            grid: [2, 1],
            walls: vec![],
            bridges: vec![],
            start: [0, 0],
            goal: [1, 0],
            goal_bonus: vec![1.0],
            move_reward: vec![-0.1],
        };
        let world = build_gridworld(&spec, 0.9, None, &Bounds::unconstrained(1), 1.0).unwrap();
        // uniform policy from the start: down (goal, +1) w.p. 1/4, else stay (−0.1)
        // V = 0.25·1 + 0.75·(−0.1 + 0.9 V)  ⇒  V = 0.175 / 0.325
        let b = policy_evaluation(&world.problem, 0, &PolicyTable::uniform(2, 4)).unwrap();
        assert!((b.v[0] - 0.175 / 0.325).abs() < 1e-12);
        assert_eq!(b.v[1], 0.0);
        // always down: straight into the goal
        let down = PolicyTable::deterministic(4, &[1, 1]).unwrap();
        let b = policy_evaluation(&world.problem, 0, &down).unwrap();
        assert!((b.v_rho - 1.0).abs() < 1e-12);
        // always up: bump forever, −0.1/(1−0.9)
        let up = PolicyTable::deterministic(4, &[0, 0]).unwrap();
        let b = policy_evaluation(&world.problem, 0, &up).unwrap();
        assert!((b.v_rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn advantage_has_zero_policy_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = MultiTaskProblem::random(&mut rng, 6, 3, 2, 0.9).unwrap();
        let pi = random_policy(&mut rng, 6, 3);
        for task in 0..2 {
            let b = policy_evaluation(&p, task, &pi).unwrap();
            for s in 0..6 {
                let mean: f64 = (0..3).map(|a| pi.prob(s, a) * b.advantage[s * 3 + a]).sum();
                assert!(mean.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn task_values_agree_with_single_evaluations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MultiTaskProblem::random(&mut rng, 5, 2, 3, 0.8).unwrap();
        let pi = random_policy(&mut rng, 5, 2);
        let values = task_values(&p, &pi).unwrap();
        for (t, v) in values.iter().enumerate() {
            assert!((policy_evaluation(&p, t, &pi).unwrap().v_rho - v).abs() < 1e-12);
        }
        let avg = average_value(&p, &pi).unwrap();
        assert!((avg - values.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_tasks_average_to_either() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let base = MultiTaskProblem::random(&mut rng, 4, 2, 1, 0.9).unwrap();
        let r = base.rewards(0).to_vec();
        let twin = MultiTaskProblem::new(
            4,
            2,
            base.transition().to_vec(),
            vec![r.clone(), r],
            0.9,
            base.rho().to_vec(),
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
            1.0,
        )
        .unwrap();
        let pi = random_policy(&mut rng, 4, 2);
        let v = policy_evaluation(&twin, 0, &pi).unwrap().v_rho;
        assert!((average_value(&twin, &pi).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn violation_examples() {
        let inf = f64::INFINITY;
        assert_eq!(violation_from_values(&[3.0, -7.0], &[-inf, -inf], &[inf, inf]), 0.0);
        assert_eq!(violation_from_values(&[3.0], &[5.0], &[inf]), 2.0);
        assert_eq!(violation_from_values(&[3.0], &[0.0], &[1.0]), 2.0);
    }

    #[test]
    fn lagrangian_cancellation_and_zero_duals() {
        let values = [2.0, 4.0];
        let (lower, upper) = ([1.0, 3.0], [5.0, 9.0]);
        let l0 = lagrangian_from_values(&values, &lower, &upper, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(l0, 3.0);
        let c = 0.7;
        let l = lagrangian_from_values(&values, &lower, &upper, &[c; 2], &[c; 2]).unwrap();
        let expected = 3.0 + c * ((5.0 - 1.0) + (9.0 - 3.0));
        assert!((l - expected).abs() < 1e-12);
        assert!(lagrangian_from_values(&values, &lower, &upper, &[-0.1, 0.0], &[0.0; 2]).is_err());
    }

    #[test]
    fn lagrangian_matches_recomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = MultiTaskProblem::random(&mut rng, 4, 3, 2, 0.85)
            .unwrap()
            .with_bounds(vec![1.0, f64::NEG_INFINITY], vec![f64::INFINITY, 6.0])
            .unwrap();
        let pi = random_policy(&mut rng, 4, 3);
        let (lambda, nu) = ([0.3, 0.9], [0.4, 0.2]);
        let v0 = policy_evaluation(&p, 0, &pi).unwrap().v_rho;
        let v1 = policy_evaluation(&p, 1, &pi).unwrap().v_rho;
        let expected = (v0 + v1) / 2.0 + 0.3 * (v0 - 1.0) - 0.2 * (v1 - 6.0);
        assert!((lagrangian_value(&p, &pi, &lambda, &nu).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn visitation_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MultiTaskProblem::random(&mut rng, 5, 2, 1, 0.7).unwrap();
        let d = discounted_visitation(&p, &random_policy(&mut rng, 5, 2)).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn uniform_rollout_takes_action_zero() {
        let spec = MazeSpec {
            grid: [2, 1],
            walls: vec![],
            bridges: vec![],
            start: [1, 0],
            goal: [0, 0],
            goal_bonus: vec![1.0],
            move_reward: vec![-0.1],
        };
        let world = build_gridworld(&spec, 0.9, None, &Bounds::unconstrained(1), 1.0).unwrap();
        let r = greedy_rollout(&world.problem, &PolicyTable::uniform(2, 4), world.start, 10).unwrap();
        // action 0 is "up", straight into the goal
        assert_eq!(r.path, vec![1, 0]);
        assert!(r.absorbed);
    }

    #[test]
    fn rollout_straight_along_top_row_and_cycle_flag() {
        let spec = MazeSpec {
            grid: [2, 4],
            walls: vec![],
            bridges: vec![],
            start: [0, 0],
            goal: [0, 3],
            goal_bonus: vec![1.0],
            move_reward: vec![-0.1],
        };
        let world = build_gridworld(&spec, 0.9, None, &Bounds::unconstrained(1), 1.0).unwrap();
        let mut probs = vec![0.0; 8 * 4];
        for s in 0..8 {
            probs[s * 4 + 3] = 0.97;
            probs[s * 4] = 0.01;
            probs[s * 4 + 1] = 0.01;
            probs[s * 4 + 2] = 0.01;
        }
        let right = PolicyTable::new(8, 4, probs).unwrap();
        let r = greedy_rollout(&world.problem, &right, world.start, 20).unwrap();
        assert_eq!(r.path, vec![0, 1, 2, 3]);
        assert!(r.absorbed && !r.cycle);

        let left = PolicyTable::deterministic(4, &[2; 8]).unwrap();
        let r = greedy_rollout(&world.problem, &left, 1, 20).unwrap();
        assert_eq!(r.path, vec![1, 0, 0]);
        assert!(r.cycle && !r.absorbed);
    }

    #[test]
    fn csv_export_has_header() {
        let p = single_state(1.0, 0.5);
        let b = policy_evaluation(&p, 0, &PolicyTable::uniform(1, 1)).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("s,a,Q,A\n0,0,2.0"));
    }
}
