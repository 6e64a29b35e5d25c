//! Shared-dynamics multi-task constrained MDP.
//!
//! All tasks share the state space, action space, transition kernel,
//! discount and initial distribution; only the reward tables and the value
//! bounds differ per task. State-action pairs are flattened as `s * |A| + a`
//! everywhere in the crate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

const DIST_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProblemDocument", into = "ProblemDocument")]
pub struct MultiTaskProblem {
    n_states: usize,
    n_actions: usize,
    /// `P(s'|s,a)` stored at `(s * |A| + a) * |S| + s'`.
    transition: Vec<f64>,
    /// One `|S|·|A|` table per task.
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    rho: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    slater_margin: f64,
    r_max: f64,
}

impl MultiTaskProblem {
    /// Builds and validates a problem. Infinite bounds (`f64::NEG_INFINITY`
    /// for `lower`, `f64::INFINITY` for `upper`) switch the constraint off.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        rho: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        slater_margin: f64,
    ) -> Result<Self> {
        let problem = Self::new_unchecked(
            n_states,
            n_actions,
            transition,
            rewards,
            gamma,
            rho,
            lower,
            upper,
            slater_margin,
        );
        let violations = problem.validate();
        if violations.is_empty() {
            Ok(problem)
        } else {
            Err(Error::InvalidProblem(violations))
        }
    }

    /// Builds a problem without checking invariants; pair with [`validate`](Self::validate).
    #[allow(clippy::too_many_arguments)]
    pub fn new_unchecked(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        rho: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        slater_margin: f64,
    ) -> Self {
        let r_max = rewards
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0_f64, |m, r| m.max(r.abs()));
        Self {
            n_states,
            n_actions,
            transition,
            rewards,
            gamma,
            rho,
            lower,
            upper,
            slater_margin,
            r_max,
        }
    }

    /// Every violated invariant, with indices. Empty means well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let (ns, na, nt) = (self.n_states, self.n_actions, self.n_tasks());
        let nsa = ns * na;
        if self.transition.len() != nsa * ns {
            out.push(Violation::Shape {
                what: "transition",
                expected: nsa * ns,
                found: self.transition.len(),
            });
        } else {
            for s in 0..ns {
                for a in 0..na {
                    let row = self.next_dist(s, a);
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > DIST_TOL {
                        out.push(Violation::TransitionRow { state: s, action: a, sum });
                    }
                }
            }
        }
        if self.rho.len() != ns {
            out.push(Violation::Shape { what: "rho", expected: ns, found: self.rho.len() });
        } else {
            let sum: f64 = self.rho.iter().sum();
            if self.rho.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > DIST_TOL {
                out.push(Violation::InitialDistribution { sum });
            }
        }
        for (task, r) in self.rewards.iter().enumerate() {
            if r.len() != nsa {
                out.push(Violation::Shape { what: "reward table", expected: nsa, found: r.len() });
                continue;
            }
            if let Some(i) = r.iter().position(|x| !x.is_finite()) {
                out.push(Violation::Reward { task, state: i / na, action: i % na });
            }
        }
        if self.lower.len() != nt {
            out.push(Violation::Shape { what: "lower bounds", expected: nt, found: self.lower.len() });
        }
        if self.upper.len() != nt {
            out.push(Violation::Shape { what: "upper bounds", expected: nt, found: self.upper.len() });
        }
        for (task, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l < u) || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                out.push(Violation::BoundsNotOrdered { task });
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            out.push(Violation::Discount { gamma: self.gamma });
        }
        if !(self.slater_margin > 0.0 && self.slater_margin <= 1.0) {
            out.push(Violation::SlaterMargin { xi: self.slater_margin });
        }
        out
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_tasks(&self) -> usize {
        self.rewards.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    /// `P(·|s,a)`.
    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = self.sa(s, a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards(&self, task: usize) -> &[f64] {
        &self.rewards[task]
    }

    #[inline]
    pub fn reward(&self, task: usize, s: usize, a: usize) -> f64 {
        self.rewards[task][self.sa(s, a)]
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn slater_margin(&self) -> f64 {
        self.slater_margin
    }

    /// Largest absolute reward over all tasks and pairs.
    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// `R_max / (1 - γ)`, the sup-norm bound on any value or Q function.
    pub fn value_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    /// Projection radius of the dual variables, `R_max / (ξ (1 - γ))`.
    pub fn dual_bound(&self) -> f64 {
        self.r_max / (self.slater_margin * (1.0 - self.gamma))
    }

    /// Same dynamics and rewards with new value bounds.
    pub fn with_bounds(&self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let mut next = self.clone();
        next.lower = lower;
        next.upper = upper;
        let violations = next.validate();
        if violations.is_empty() {
            Ok(next)
        } else {
            Err(Error::InvalidProblem(violations))
        }
    }

    /// Same problem with a different initial distribution.
    pub fn with_rho(&self, rho: Vec<f64>) -> Result<Self> {
        let mut next = self.clone();
        next.rho = rho;
        let violations = next.validate();
        if violations.is_empty() {
            Ok(next)
        } else {
            Err(Error::InvalidProblem(violations))
        }
    }

    /// Random dense instance with rewards in `[0, 1)`, uniform `ρ` and no
    /// finite bounds. Transition rows are normalized uniform draws, so every
    /// policy induces an irreducible aperiodic chain.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        n_tasks: usize,
        gamma: f64,
    ) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 0.05).collect();
            let sum: f64 = row.iter().sum();
            transition.extend(row.iter().map(|p| p / sum));
        }
        let rewards = (0..n_tasks)
            .map(|_| (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect())
            .collect();
        Self::new(
            n_states,
            n_actions,
            transition,
            rewards,
            gamma,
            vec![1.0 / n_states as f64; n_states],
            vec![f64::NEG_INFINITY; n_tasks],
            vec![f64::INFINITY; n_tasks],
            1.0,
        )
    }
}

/// JSON form. Unbounded constraints are written as `null`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemDocument {
    n_states: usize,
    n_actions: usize,
    /// `[s][a][s']`
    transition: Vec<Vec<Vec<f64>>>,
    /// `[task][s][a]`
    rewards: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    rho: Vec<f64>,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
    xi: f64,
}

impl TryFrom<ProblemDocument> for MultiTaskProblem {
    type Error = Error;

    fn try_from(doc: ProblemDocument) -> Result<Self> {
        let transition = doc.transition.into_iter().flatten().flatten().collect();
        let rewards = doc
            .rewards
            .into_iter()
            .map(|t| t.into_iter().flatten().collect())
            .collect();
        MultiTaskProblem::new(
            doc.n_states,
            doc.n_actions,
            transition,
            rewards,
            doc.gamma,
            doc.rho,
            doc.lower.iter().map(|l| l.unwrap_or(f64::NEG_INFINITY)).collect(),
            doc.upper.iter().map(|u| u.unwrap_or(f64::INFINITY)).collect(),
            doc.xi,
        )
    }
}

impl From<MultiTaskProblem> for ProblemDocument {
    fn from(p: MultiTaskProblem) -> Self {
        let (ns, na) = (p.n_states, p.n_actions);
        let transition = (0..ns)
            .map(|s| (0..na).map(|a| p.next_dist(s, a).to_vec()).collect())
            .collect();
        let rewards = p
            .rewards
            .iter()
            .map(|r| r.chunks(na).map(|row| row.to_vec()).collect())
            .collect();
        let finite = |x: f64| x.is_finite().then_some(x);
        ProblemDocument {
            n_states: ns,
            n_actions: na,
            transition,
            rewards,
            gamma: p.gamma,
            rho: p.rho,
            lower: p.lower.iter().copied().map(finite).collect(),
            upper: p.upper.iter().copied().map(finite).collect(),
            xi: p.slater_margin,
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state() -> MultiTaskProblem {
        MultiTaskProblem::new(
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
        .unwrap()
    }

    #[test]
    fn well_formed_problem_has_no_violations() {
        assert!(two_state().validate().is_empty());
    }

    #[test]
    fn short_transition_row_is_reported_with_indices() {
        let p = MultiTaskProblem::new_unchecked(
            2,
            1,
            vec![0.0, 0.9, 0.0, 1.0],
            vec![vec![0.0, 1.0]],
            0.5,
            vec![1.0, 0.0],
            vec![f64::NEG_INFINITY],
            vec![f64::INFINITY],
            1.0,
        );
        let v = p.validate();
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::TransitionRow { state: 0, action: 0, .. }));
    }

    #[test]
    fn equal_bounds_are_rejected() {
        let err = two_state().with_bounds(vec![1.0], vec![1.0]).unwrap_err();
        assert!(err.to_string().contains("bounds not strictly ordered, task 0"));
    }

    #[test]
    fn discount_must_be_strictly_inside_unit_interval() {
        for gamma in [0.0, 1.0, -0.1] {
            let p = MultiTaskProblem::new_unchecked(
                1,
                1,
                vec![1.0],
                vec![vec![1.0]],
                gamma,
                vec![1.0],
                vec![f64::NEG_INFINITY],
                vec![f64::INFINITY],
                1.0,
            );
            assert_eq!(p.validate(), vec![Violation::Discount { gamma }]);
        }
    }

    #[test]
    fn dual_bound_uses_largest_reward() {
        let p = MultiTaskProblem::new(
            1,
            2,
            vec![1.0, 1.0],
            vec![vec![0.2, -4.0], vec![1.0, 3.0]],
            0.75,
            vec![1.0],
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
            0.5,
        )
        .unwrap();
        assert_eq!(p.r_max(), 4.0);
        assert_eq!(p.dual_bound(), 4.0 / (0.5 * 0.25));
    }

    #[test]
    fn json_round_trip_keeps_infinite_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MultiTaskProblem::random(&mut rng, 3, 2, 2, 0.9)
            .unwrap()
            .with_bounds(vec![0.5, f64::NEG_INFINITY], vec![f64::INFINITY, 9.0])
            .unwrap();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("null"));
        let back: MultiTaskProblem = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn json_with_bad_row_fails_to_load() {
        let text = r#"{"n_states":1,"n_actions":1,"transition":[[[0.5]]],"rewards":[[[1.0]]],
            "gamma":0.9,"rho":[1.0],"lower":[null],"upper":[null],"xi":1.0}"#;
        let err = serde_json::from_str::<MultiTaskProblem>(text).unwrap_err();
        assert!(err.to_string().contains("transition row"));
    }
}
