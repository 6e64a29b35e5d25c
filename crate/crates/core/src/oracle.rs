//! Independent optima for small constrained problems, used to score the
//! learning algorithms.
//!
//! [`tiny_cmdp_oracle`] searches the product of per-state action simplices
//! on a grid and is only approximate (error of the order of the grid
//! resolution). [`lagrangian_dual_oracle`] minimizes the dual function
//! `D(λ, ν) = max_π L(π, λ, ν)` with exact policy iteration for the inner
//! maximization and nested golden-section search for the outer one; under
//! strong duality its value is the constrained optimum.

use crate::error::{Error, Result};
use crate::eval::{evaluate_rewards, task_values};
use crate::exec::{map_range, Execution};
use crate::policy::PolicyTable;
use crate::problem::MultiTaskProblem;

const COARSE: usize = 40;
const FINE: usize = 200;
const MAX_GRID_POINTS: usize = 4_000_000;
const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// Best feasible `V₀(ρ)` found.
    pub value: f64,
    /// Policy attaining it.
    pub policy: PolicyTable,
}

/// All points of the `n`-part simplex with coordinates in multiples of `1/res`.
fn simplex_grid(n: usize, res: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(n - 1, left - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, res, &mut Vec::new(), &mut out);
    out
}

fn feasible(values: &[f64], problem: &MultiTaskProblem) -> bool {
    values
        .iter()
        .zip(problem.lower().iter().zip(problem.upper()))
        .all(|(v, (l, u))| *v >= l - FEASIBILITY_TOL && *v <= u + FEASIBILITY_TOL)
}

fn score(problem: &MultiTaskProblem, probs: Vec<f64>) -> Option<(f64, PolicyTable)> {
    let policy = PolicyTable::new(problem.n_states(), problem.n_actions(), probs).ok()?;
    let values = task_values(problem, &policy).ok()?;
    feasible(&values, problem).then(|| (values.iter().sum::<f64>() / values.len() as f64, policy))
}

/// Grid search at resolution 1/40 followed by a 1/200 refinement around the
/// incumbent, one state block at a time until no block improves.
pub fn tiny_cmdp_oracle(problem: &MultiTaskProblem, exec: Execution) -> Result<OracleSolution> {
    let (ns, na) = (problem.n_states(), problem.n_actions());
    if ns * na > 12 || problem.n_tasks() > 3 {
        return Err(Error::InvalidParameter(format!(
            "grid oracle needs |S||A| <= 12 and N <= 3 (got {} and {})",
            ns * na,
            problem.n_tasks()
        )));
    }
    let rows = simplex_grid(na, COARSE);
    let total = (0..ns).try_fold(1usize, |acc, _| acc.checked_mul(rows.len()));
    let total = match total {
        Some(t) if t <= MAX_GRID_POINTS => t,
        _ => {
            return Err(Error::InvalidParameter(format!(
                "grid oracle would need {}^{ns} points",
                rows.len()
            )))
        }
    };

    let decode = |mut index: usize| {
        let mut probs = Vec::with_capacity(ns * na);
        for _ in 0..ns {
            let row = &rows[index % rows.len()];
            index /= rows.len();
            probs.extend(row.iter().map(|&k| k as f64 / COARSE as f64));
        }
        probs
    };
    let chunk = 4096;
    let n_chunks = total.div_ceil(chunk);
    let best_per_chunk = map_range(exec, n_chunks, |c| {
        let mut best: Option<(f64, usize)> = None;
        for index in c * chunk..((c + 1) * chunk).min(total) {
            if let Some((v, _)) = score(problem, decode(index)) {
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, index));
                }
            }
        }
        best
    });
    let (_, best_index) = best_per_chunk
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<(f64, usize)>, x| match acc {
            Some(a) if a.0 >= x.0 => Some(a),
            _ => Some(x),
        })
        .ok_or_else(|| Error::Infeasible("no feasible point on the 1/40 policy grid".into()))?;

    let ratio = FINE / COARSE;
    let mut units: Vec<usize> = decode(best_index)
        .iter()
        .map(|p| (p * FINE as f64).round() as usize)
        .collect();
    let fine_rows = simplex_grid(na, FINE);
    let to_probs = |u: &[usize]| u.iter().map(|&k| k as f64 / FINE as f64).collect::<Vec<_>>();
    let (mut best_value, mut best_policy) = score(problem, to_probs(&units)).expect("incumbent is feasible");
    for _sweep in 0..50 {
        let mut improved = false;
        for s in 0..ns {
            let center = units[s * na..(s + 1) * na].to_vec();
            let candidates: Vec<&Vec<usize>> = fine_rows
                .iter()
                .filter(|row| row.iter().zip(&center).all(|(a, b)| a.abs_diff(*b) <= ratio))
                .collect();
            let results = map_range(exec, candidates.len(), |i| {
                let mut trial = units.clone();
                trial[s * na..(s + 1) * na].copy_from_slice(candidates[i]);
                score(problem, to_probs(&trial)).map(|(v, _)| v)
            });
            let mut pick = None;
            for (i, v) in results.into_iter().enumerate() {
                if let Some(v) = v {
                    if v > best_value + 1e-13 && pick.is_none_or(|(_, pv)| v > pv) {
                        pick = Some((i, v));
                    }
                }
            }
            if let Some((i, _)) = pick {
                units[s * na..(s + 1) * na].copy_from_slice(candidates[i]);
                let (v, p) = score(problem, to_probs(&units)).expect("candidate was feasible");
                best_value = v;
                best_policy = p;
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
    Ok(OracleSolution { value: best_value, policy: best_policy })
}

/// Optimal deterministic policy for one reward table, by policy iteration.
pub fn optimal_policy(problem: &MultiTaskProblem, rewards: &[f64]) -> Result<(PolicyTable, f64)> {
    let (ns, na) = (problem.n_states(), problem.n_actions());
    let mut actions = vec![0usize; ns];
    for _ in 0..10_000 {
        let policy = PolicyTable::deterministic(na, &actions)?;
        let bundle = evaluate_rewards(problem, rewards, &policy)?;
        let scale = bundle.q.iter().fold(1.0_f64, |m, q| m.max(q.abs()));
        let mut changed = false;
        for s in 0..ns {
            let q = &bundle.q[s * na..(s + 1) * na];
            let mut best = actions[s];
            for a in 0..na {
                if q[a] > q[best] + 1e-12 * scale {
                    best = a;
                }
            }
            if best != actions[s] {
                actions[s] = best;
                changed = true;
            }
        }
        if !changed {
            return Ok((policy, bundle.v_rho));
        }
    }
    Err(Error::Numerical("policy iteration did not terminate".into()))
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    /// `min D(λ, ν)`, equal to the constrained optimum under strong duality.
    pub value: f64,
    pub lambda: Vec<f64>,
    pub nu: Vec<f64>,
}

/// `D(λ, ν) = max_π V₀ + Σ λᵢ(Vᵢ − ℓᵢ) − νᵢ(Vᵢ − uᵢ)`.
pub fn dual_function(problem: &MultiTaskProblem, lambda: &[f64], nu: &[f64]) -> Result<f64> {
    let n = problem.n_tasks();
    let mut combined = vec![0.0; problem.n_pairs()];
    let mut offset = 0.0;
    for i in 0..n {
        let mut weight = 1.0 / n as f64;
        if problem.lower()[i].is_finite() {
            weight += lambda[i];
            offset -= lambda[i] * problem.lower()[i];
        }
        if problem.upper()[i].is_finite() {
            weight -= nu[i];
            offset += nu[i] * problem.upper()[i];
        }
        for (c, r) in combined.iter_mut().zip(problem.rewards(i)) {
            *c += weight * r;
        }
    }
    let (_, value) = optimal_policy(problem, &combined)?;
    Ok(value + offset)
}

fn golden_min<F: FnMut(f64) -> Result<f64>>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<(f64, f64)> {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d)?;
        }
    }
    // the box edges matter for piecewise-linear duals
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for x in [lo, hi] {
        if (x - best.0).abs() <= 2.0 * tol {
            let fx = f(x)?;
            if fx < best.1 {
                best = (x, fx);
            }
        }
    }
    Ok(best)
}

/// Minimizes the dual over `[0, upper_limit]` per finite bound. Supports up
/// to three finite bounds (nested one-dimensional searches).
pub fn lagrangian_dual_oracle(problem: &MultiTaskProblem, upper_limit: f64) -> Result<DualSolution> {
    let n = problem.n_tasks();
    // (task, is_upper)
    let mut coords = Vec::new();
    for i in 0..n {
        if problem.lower()[i].is_finite() {
            coords.push((i, false));
        }
        if problem.upper()[i].is_finite() {
            coords.push((i, true));
        }
    }
    if coords.len() > 3 {
        return Err(Error::InvalidParameter("dual oracle supports at most three finite bounds".into()));
    }
    let tol = 1e-10 * upper_limit.max(1.0);
    fn search(
        problem: &MultiTaskProblem,
        coords: &[(usize, bool)],
        depth: usize,
        x: &mut Vec<f64>,
        limit: f64,
        tol: f64,
    ) -> Result<f64> {
        if depth == coords.len() {
            let n = problem.n_tasks();
            let (mut lambda, mut nu) = (vec![0.0; n], vec![0.0; n]);
            for (&(i, up), v) in coords.iter().zip(x.iter()) {
                if up {
                    nu[i] = *v;
                } else {
                    lambda[i] = *v;
                }
            }
            return dual_function(problem, &lambda, &nu);
        }
        let (arg, value) = golden_min(
            |v| {
                x[depth] = v;
                search(problem, coords, depth + 1, x, limit, tol)
            },
            0.0,
            limit,
            tol,
        )?;
        x[depth] = arg;
        Ok(value)
    }
    let mut x = vec![0.0; coords.len()];
    let value = search(problem, &coords, 0, &mut x, upper_limit, tol)?;
    let (mut lambda, mut nu) = (vec![0.0; n], vec![0.0; n]);
    for (&(i, up), v) in coords.iter().zip(&x) {
        if up {
            nu[i] = *v;
        } else {
            lambda[i] = *v;
        }
    }
    Ok(DualSolution { value, lambda, nu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bandit(rewards: Vec<Vec<f64>>, lower: Vec<f64>) -> MultiTaskProblem {
        let n = rewards.len();
        let na = rewards[0].len();
        MultiTaskProblem::new(
            1,
            na,
            vec![1.0; na],
            rewards,
            // γ = 0 is outside the admissible range; a tiny discount on a
            // one-state problem only rescales values by 1/(1−γ)
            1e-9,
            vec![1.0],
            lower,
            vec![f64::INFINITY; n],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(simplex_grid(2, 40).len(), 41);
        assert_eq!(simplex_grid(3, 40).len(), 861);
        assert!(simplex_grid(3, 4).iter().all(|r| r.iter().sum::<usize>() == 4));
    }

    #[test]
    fn unconstrained_bandit_picks_best_arm() {
        let p = bandit(vec![vec![0.2, 0.7]], vec![f64::NEG_INFINITY]);
        let sol = tiny_cmdp_oracle(&p, Execution::Sequential).unwrap();
        assert!((sol.value - 0.7).abs() < 1e-8);
        assert_eq!(sol.policy.prob(0, 1), 1.0);
    }

    #[test]
    fn constrained_bandit_lands_on_boundary() {
        // V₀ = ½(0.2p + 0.7(1−p)) + ½(0.4p) = 0.35 − 0.05p, V₁ = 0.4p ≥ 0.2 ⇒ p ≥ ½
        let p = bandit(vec![vec![0.2, 0.7], vec![0.4, 0.0]], vec![f64::NEG_INFINITY, 0.2]);
        let sol = tiny_cmdp_oracle(&p, Execution::Sequential).unwrap();
        assert!((sol.value - 0.325).abs() < 1e-8);
        assert!((sol.policy.prob(0, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fine_refinement_reaches_off_grid_boundary() {
        // p ≥ 0.37 is not on the 1/40 grid but is on the 1/200 grid
        let p = bandit(vec![vec![0.2, 0.7], vec![0.4, 0.0]], vec![f64::NEG_INFINITY, 0.4 * 0.37]);
        let exact = 0.35 - 0.05 * 0.37;
        let sol = tiny_cmdp_oracle(&p, Execution::Sequential).unwrap();
        assert!(sol.value <= exact + 1e-8);
        assert!((sol.value - exact).abs() < 1e-8);
        let dual = lagrangian_dual_oracle(&p, 10.0).unwrap();
        assert!((dual.value - exact).abs() < 1e-7, "{}", dual.value);
    }

    #[test]
    fn infeasible_grid_is_reported() {
        let p = bandit(vec![vec![0.0, 1.0]], vec![2.0]);
        assert!(matches!(tiny_cmdp_oracle(&p, Execution::Sequential), Err(Error::Infeasible(_))));
    }

    #[test]
    fn too_large_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MultiTaskProblem::random(&mut rng, 5, 3, 1, 0.9).unwrap();
        assert!(tiny_cmdp_oracle(&p, Execution::Sequential).is_err());
    }

    #[test]
    fn grid_and_dual_oracles_agree_on_two_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = MultiTaskProblem::random(&mut rng, 2, 2, 2, 0.8).unwrap();
        // pick ℓ halfway between the task-1 value of the unconstrained optimum and its own optimum
        let (pi0, _) = optimal_policy(&base, &average(&base)).unwrap();
        let v1_at_free = task_values(&base, &pi0).unwrap()[1];
        let (_, v1_best) = optimal_policy(&base, base.rewards(1)).unwrap();
        let ell = 0.5 * (v1_at_free + v1_best);
        let p = base.with_bounds(vec![f64::NEG_INFINITY, ell], vec![f64::INFINITY; 2]).unwrap();
        let grid = tiny_cmdp_oracle(&p, Execution::Parallel).unwrap();
        let dual = lagrangian_dual_oracle(&p, p.dual_bound()).unwrap();
        assert!(grid.value <= dual.value + 1e-8);
        assert!(dual.value - grid.value < 0.02 * p.value_bound(), "{} vs {}", grid.value, dual.value);
        assert!(dual.lambda[1] > 0.0);
    }

    #[test]
    fn grid_is_argmax_over_its_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MultiTaskProblem::random(&mut rng, 2, 2, 1, 0.5).unwrap();
        let sol = tiny_cmdp_oracle(&p, Execution::Sequential).unwrap();
        for a in 0..=COARSE {
            for b in 0..=COARSE {
                let x = a as f64 / COARSE as f64;
                let y = b as f64 / COARSE as f64;
                let pi = PolicyTable::new(2, 2, vec![x, 1.0 - x, y, 1.0 - y]).unwrap();
                assert!(task_values(&p, &pi).unwrap()[0] <= sol.value + 1e-12);
            }
        }
    }

    fn average(p: &MultiTaskProblem) -> Vec<f64> {
        let n = p.n_tasks() as f64;
        (0..p.n_pairs()).map(|i| (0..p.n_tasks()).map(|t| p.rewards(t)[i]).sum::<f64>() / n).collect()
    }
}
