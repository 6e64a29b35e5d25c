use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A single broken invariant of a [`MultiTaskProblem`](crate::problem::MultiTaskProblem).
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Transition row for `(state, action)` has a negative entry or does not sum to one.
    TransitionRow { state: usize, action: usize, sum: f64 },
    /// Initial distribution does not sum to one or has a negative entry.
    InitialDistribution { sum: f64 },
    /// `lower < upper` does not hold for the task.
    BoundsNotOrdered { task: usize },
    /// Discount outside the open unit interval.
    Discount { gamma: f64 },
    /// A reward entry is NaN or infinite.
    Reward { task: usize, state: usize, action: usize },
    /// Slater margin outside `(0, 1]`.
    SlaterMargin { xi: f64 },
    /// A table has the wrong number of entries.
    Shape { what: &'static str, expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TransitionRow { state, action, sum } => write!(
                f,
                "transition row (s={state}, a={action}) is not a distribution (sum {sum})"
            ),
            Violation::InitialDistribution { sum } => {
                write!(f, "initial distribution is not a distribution (sum {sum})")
            }
            Violation::BoundsNotOrdered { task } => {
                write!(f, "bounds not strictly ordered, task {task}")
            }
            Violation::Discount { gamma } => write!(f, "discount {gamma} outside (0, 1)"),
            Violation::Reward { task, state, action } => write!(
                f,
                "reward of task {task} at (s={state}, a={action}) is not finite"
            ),
            Violation::SlaterMargin { xi } => write!(f, "slater margin {xi} outside (0, 1]"),
            Violation::Shape { what, expected, found } => {
                write!(f, "{what} has {found} entries, expected {expected}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {}", join(.0))]
    InvalidProblem(Vec<Violation>),

    #[error("invalid maze at cell ({row}, {col}): {reason}")]
    InvalidMaze { row: usize, col: usize, reason: String },

    #[error("invalid maze: {0}")]
    InvalidMazeShape(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("graph is disconnected")]
    Disconnected,

    #[error("graph effectively disconnected (sigma2 = {0})")]
    EffectivelyDisconnected(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("no stationary distribution: {0}")]
    NoStationaryDistribution(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { pointer: pointer.into(), message: message.into() }
    }
}

fn join(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
