use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-12;

/// Row-stochastic `|S|×|A|` table `π(a|s)`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for (s, row) in probs.chunks(n_actions.max(1)).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    /// One action per state with probability one.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidPolicy(format!("action {a} out of range in state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    /// Per-state softmax of `logits`, with the row maximum subtracted first.
    pub fn softmax(n_states: usize, n_actions: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch(format!(
                "logits have {} entries, expected {}",
                logits.len(),
                n_states * n_actions
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite policy parameter".into()));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(n_actions) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = probs.len();
            probs.extend(row.iter().map(|x| (x - max).exp()));
            let z: f64 = probs[start..].iter().sum();
            probs[start..].iter_mut().for_each(|p| *p /= z);
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Most likely action in `s`; ties go to the lowest index.
    pub fn greedy_action(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }

    /// `ε/|A| + (1 − ε) π(a|s)`.
    pub fn mix_uniform(&self, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!("exploration rate {epsilon} outside [0, 1]")));
        }
        let floor = epsilon / self.n_actions as f64;
        let probs = self.probs.iter().map(|p| floor + (1.0 - epsilon) * p).collect();
        Ok(Self { n_states: self.n_states, n_actions: self.n_actions, probs })
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Euclidean distance between the flattened tables.
    pub fn distance(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rows_not_summing_to_one() {
        assert!(PolicyTable::new(1, 2, vec![0.6, 0.6]).is_err());
        assert!(PolicyTable::new(1, 2, vec![1.5, -0.5]).is_err());
        assert!(PolicyTable::new(1, 2, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn greedy_ties_go_to_lowest_action() {
        let p = PolicyTable::uniform(2, 4);
        assert_eq!(p.greedy_action(0), 0);
        let p = PolicyTable::new(1, 3, vec![0.2, 0.4, 0.4]).unwrap();
        assert_eq!(p.greedy_action(0), 1);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = PolicyTable::softmax(1, 2, &[1e6, 1e6 - 1.0]).unwrap();
        assert!((p.prob(0, 0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    }
}
