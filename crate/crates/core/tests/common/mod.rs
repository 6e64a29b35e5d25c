#![allow(dead_code)]

use cmtrl::policy::PolicyTable;
use cmtrl::problem::MultiTaskProblem;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `Q = r + γ P_π Q` by fixed-point iteration to round-off.
pub fn bellman_q(p: &MultiTaskProblem, rewards: &[f64], pi: &PolicyTable) -> Vec<f64> {
    let (ns, na) = (p.n_states(), p.n_actions());
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum()).collect();
        let next: Vec<f64> = (0..ns * na)
            .map(|i| rewards[i] + p.gamma() * p.next_dist(i / na, i % na).iter().zip(&v).map(|(t, x)| t * x).sum::<f64>())
            .collect();
        let diff = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if diff <= 1e-14 * (1.0 + p.value_bound()) {
            return q;
        }
    }
}

pub fn value_at_rho(p: &MultiTaskProblem, q: &[f64], pi: &PolicyTable) -> f64 {
    let na = p.n_actions();
    (0..p.n_states()).map(|s| p.rho()[s] * (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum::<f64>()).sum()
}

pub fn task_values(p: &MultiTaskProblem, pi: &PolicyTable) -> Vec<f64> {
    (0..p.n_tasks()).map(|t| value_at_rho(p, &bellman_q(p, p.rewards(t), pi), pi)).collect()
}

/// Second largest singular value as `‖W − 11ᵀ/n‖₂`.
pub fn sigma2(n: usize, w: &[f64]) -> f64 {
    let m = DMatrix::from_fn(n, n, |i, j| w[i * n + j] - 1.0 / n as f64);
    m.singular_values().max()
}

pub fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize, epsilon: f64) -> PolicyTable {
    let logits: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-3.0..3.0)).collect();
    PolicyTable::softmax(ns, na, &logits).unwrap().mix_uniform(epsilon).unwrap()
}

pub fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Every deterministic policy, for brute-force bounds on tiny problems.
pub fn deterministic_policies(ns: usize, na: usize) -> Vec<PolicyTable> {
    let total = na.pow(ns as u32);
    (0..total)
        .map(|mut code| {
            let actions: Vec<usize> = (0..ns)
                .map(|_| {
                    let a = code % na;
                    code /= na;
                    a
                })
                .collect();
            PolicyTable::deterministic(na, &actions).unwrap()
        })
        .collect()
}
