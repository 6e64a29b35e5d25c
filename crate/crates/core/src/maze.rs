//! Deterministic grid mazes with per-task bridge prices.
//!
//! Every non-wall cell is a state, numbered row-major. Actions are
//! up, down, left, right. Moving into a wall or off the grid leaves the agent
//! in place. Entering the goal pays the task's goal bonus, entering a bridge
//! cell pays that bridge's price, any other move pays the task's move reward.
//! The goal is absorbing and pays nothing afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyTable;
use crate::problem::MultiTaskProblem;

pub const ACTIONS: [&str; 4] = ["up", "down", "left", "right"];
const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

pub type Cell = [usize; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bridge {
    pub cells: Vec<Cell>,
    /// Reward for stepping onto any of the cells, one entry per task.
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeSpec {
    /// `[rows, cols]`
    pub grid: [usize; 2],
    #[serde(default)]
    pub walls: Vec<Cell>,
    #[serde(default)]
    pub bridges: Vec<Bridge>,
    pub start: Cell,
    pub goal: Cell,
    pub goal_bonus: Vec<f64>,
    pub move_reward: Vec<f64>,
}

/// A maze together with the CMDP parameters needed to build a problem.
/// Bounds use `null` for "unconstrained"; a missing `rho` means a point
/// mass on the start cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeDocument {
    pub grid: [usize; 2],
    #[serde(default)]
    pub walls: Vec<Cell>,
    #[serde(default)]
    pub bridges: Vec<Bridge>,
    pub start: Cell,
    pub goal: Cell,
    pub goal_bonus: Vec<f64>,
    pub move_reward: Vec<f64>,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    pub xi: f64,
}

impl MazeDocument {
    pub fn new(spec: MazeSpec, gamma: f64, rho: Option<Vec<f64>>, bounds: &Bounds, xi: f64) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        Self {
            grid: spec.grid,
            walls: spec.walls,
            bridges: spec.bridges,
            start: spec.start,
            goal: spec.goal,
            goal_bonus: spec.goal_bonus,
            move_reward: spec.move_reward,
            gamma,
            rho,
            lower: bounds.lower.iter().copied().map(finite).collect(),
            upper: bounds.upper.iter().copied().map(finite).collect(),
            xi,
        }
    }

    pub fn spec(&self) -> MazeSpec {
        MazeSpec {
            grid: self.grid,
            walls: self.walls.clone(),
            bridges: self.bridges.clone(),
            start: self.start,
            goal: self.goal,
            goal_bonus: self.goal_bonus.clone(),
            move_reward: self.move_reward.clone(),
        }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            lower: self.lower.iter().map(|l| l.unwrap_or(f64::NEG_INFINITY)).collect(),
            upper: self.upper.iter().map(|u| u.unwrap_or(f64::INFINITY)).collect(),
        }
    }

    pub fn build(&self) -> Result<GridWorld> {
        build_gridworld(&self.spec(), self.gamma, self.rho.clone(), &self.bounds(), self.xi)
    }
}

/// Per-task value bounds; infinities mean "no constraint".
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unconstrained(n_tasks: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n_tasks], upper: vec![f64::INFINITY; n_tasks] }
    }

    pub fn lower_only(lower: Vec<f64>) -> Self {
        let n = lower.len();
        Self { lower, upper: vec![f64::INFINITY; n] }
    }
}

/// A built maze: the CMDP plus the cell layout needed to read paths back.
#[derive(Debug, Clone)]
pub struct GridWorld {
    pub problem: MultiTaskProblem,
    pub rows: usize,
    pub cols: usize,
    cells: Vec<Cell>,
    state_of: Vec<Option<usize>>,
    pub start: usize,
    pub goal: usize,
    bridge_of_state: Vec<Option<usize>>,
}

impl GridWorld {
    pub fn cell(&self, state: usize) -> Cell {
        self.cells[state]
    }

    pub fn state(&self, cell: Cell) -> Option<usize> {
        if cell[0] < self.rows && cell[1] < self.cols {
            self.state_of[cell[0] * self.cols + cell[1]]
        } else {
            None
        }
    }

    /// Index of the bridge occupying `state`, if any.
    pub fn bridge_at(&self, state: usize) -> Option<usize> {
        self.bridge_of_state[state]
    }

    /// Bridges visited along a state path, in order, without repeats.
    pub fn bridges_crossed(&self, path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        for &s in path {
            if let Some(b) = self.bridge_at(s) {
                if !out.contains(&b) {
                    out.push(b);
                }
            }
        }
        out
    }

    fn successor(&self, s: usize, a: usize) -> usize {
        self.problem.next_dist(s, a).iter().position(|p| *p == 1.0).expect("maze dynamics are deterministic")
    }

    /// Breadth-first route from `from` to any state in `targets`, avoiding
    /// `blocked`; returns the visited states and the action taken at each.
    fn route(&self, from: usize, targets: &[usize], blocked: &[bool]) -> Option<(Vec<usize>, Vec<usize>)> {
        let n = self.problem.n_states();
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::from([from]);
        seen[from] = true;
        while let Some(s) = queue.pop_front() {
            if targets.contains(&s) {
                let (mut states, mut actions) = (vec![s], Vec::new());
                let mut cur = s;
                while let Some((prev, a)) = parent[cur] {
                    states.push(prev);
                    actions.push(a);
                    cur = prev;
                }
                states.reverse();
                actions.reverse();
                return Some((states, actions));
            }
            for a in 0..MOVES.len() {
                let t = self.successor(s, a);
                if !seen[t] && !blocked[t] {
                    seen[t] = true;
                    parent[t] = Some((s, a));
                    queue.push_back(t);
                }
            }
        }
        None
    }

    /// Deterministic policy following a shortest start-to-goal route that
    /// crosses bridge `bridge` and no other. States off the route take
    /// action 0. Also returns the route.
    pub fn policy_via_bridge(&self, bridge: usize) -> Result<(PolicyTable, Vec<usize>)> {
        let n = self.problem.n_states();
        let on_bridge: Vec<usize> = (0..n).filter(|&s| self.bridge_at(s) == Some(bridge)).collect();
        if on_bridge.is_empty() {
            return Err(Error::InvalidParameter(format!("maze has no bridge {bridge}")));
        }
        let mut blocked: Vec<bool> = (0..n).map(|s| self.bridge_at(s).is_some_and(|b| b != bridge)).collect();
        let unreachable = || Error::InvalidParameter(format!("no route through bridge {bridge}"));
        let (first, first_actions) = self.route(self.start, &on_bridge, &blocked).ok_or_else(unreachable)?;
        for &s in &first[..first.len() - 1] {
            blocked[s] = true;
        }
        let crossing = *first.last().expect("route is never empty");
        let (second, second_actions) = self.route(crossing, &[self.goal], &blocked).ok_or_else(unreachable)?;
        let mut actions = vec![0; n];
        for (s, a) in first.iter().zip(&first_actions).chain(second.iter().zip(&second_actions)) {
            actions[*s] = *a;
        }
        let mut path = first;
        path.extend_from_slice(&second[1..]);
        Ok((PolicyTable::deterministic(MOVES.len(), &actions)?, path))
    }
}

pub fn build_gridworld(
    spec: &MazeSpec,
    gamma: f64,
    rho: Option<Vec<f64>>,
    bounds: &Bounds,
    xi: f64,
) -> Result<GridWorld> {
    let [rows, cols] = spec.grid;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidMazeShape("empty grid".into()));
    }
    let n_tasks = spec.goal_bonus.len();
    if n_tasks == 0 {
        return Err(Error::InvalidMazeShape("no tasks (goal_bonus is empty)".into()));
    }
    if spec.move_reward.len() != n_tasks {
        return Err(Error::InvalidMazeShape(format!(
            "move_reward has {} entries, goal_bonus has {n_tasks}",
            spec.move_reward.len()
        )));
    }
    if bounds.lower.len() != n_tasks || bounds.upper.len() != n_tasks {
        return Err(Error::InvalidMazeShape(format!("bounds must have {n_tasks} entries")));
    }

    let inside = |c: &Cell| c[0] < rows && c[1] < cols;
    let bad = |c: &Cell, reason: &str| Error::InvalidMaze { row: c[0], col: c[1], reason: reason.into() };
    let mut is_wall = vec![false; rows * cols];
    for w in &spec.walls {
        if !inside(w) {
            return Err(bad(w, "wall outside grid"));
        }
        is_wall[w[0] * cols + w[1]] = true;
    }
    for (name, c) in [("start", &spec.start), ("goal", &spec.goal)] {
        if !inside(c) {
            return Err(bad(c, &format!("{name} outside grid")));
        }
        if is_wall[c[0] * cols + c[1]] {
            return Err(bad(c, &format!("{name} on a wall")));
        }
    }
    let mut bridge_cell = vec![None; rows * cols];
    for (b, bridge) in spec.bridges.iter().enumerate() {
        if bridge.rewards.len() != n_tasks {
            return Err(Error::InvalidMazeShape(format!(
                "bridge {b} has {} rewards, expected {n_tasks}",
                bridge.rewards.len()
            )));
        }
        for c in &bridge.cells {
            if !inside(c) {
                return Err(bad(c, "bridge outside grid"));
            }
            if is_wall[c[0] * cols + c[1]] {
                return Err(bad(c, "bridge on a wall"));
            }
            if *c == spec.goal {
                return Err(bad(c, "bridge on the goal"));
            }
            bridge_cell[c[0] * cols + c[1]] = Some(b);
        }
    }

    let mut cells = Vec::new();
    let mut state_of = vec![None; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if !is_wall[r * cols + c] {
                state_of[r * cols + c] = Some(cells.len());
                cells.push([r, c]);
            }
        }
    }
    let ns = cells.len();
    let na = MOVES.len();
    let start = state_of[spec.start[0] * cols + spec.start[1]].unwrap();
    let goal = state_of[spec.goal[0] * cols + spec.goal[1]].unwrap();

    let mut transition = vec![0.0; ns * na * ns];
    let mut rewards = vec![vec![0.0; ns * na]; n_tasks];
    for (s, &[r, c]) in cells.iter().enumerate() {
        for (a, (dr, dc)) in MOVES.iter().enumerate() {
            let row = (s * na + a) * ns;
            if s == goal {
                transition[row + s] = 1.0;
                continue;
            }
            let (nr, nc) = (r as isize + dr, c as isize + dc);
            let target = (nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols)
                .then(|| state_of[nr as usize * cols + nc as usize])
                .flatten()
                .unwrap_or(s);
            transition[row + target] = 1.0;
            let [tr, tc] = cells[target];
            for (task, table) in rewards.iter_mut().enumerate() {
                table[s * na + a] = if target == goal {
                    spec.goal_bonus[task]
                } else if let Some(b) = bridge_cell[tr * cols + tc] {
                    spec.bridges[b].rewards[task]
                } else {
                    spec.move_reward[task]
                };
            }
        }
    }

    let rho = match rho {
        Some(rho) => rho,
        None => {
            let mut rho = vec![0.0; ns];
            rho[start] = 1.0;
            rho
        }
    };
    let problem = MultiTaskProblem::new(
        ns,
        na,
        transition,
        rewards,
        gamma,
        rho,
        bounds.lower.clone(),
        bounds.upper.clone(),
        xi,
    )?;
    let bridge_of_state = cells.iter().map(|&[r, c]| bridge_cell[r * cols + c]).collect();
    Ok(GridWorld { problem, rows, cols, cells, state_of, start, goal, bridge_of_state })
}

/// Discount used by the three-maze benchmark.
pub const THREE_MAZE_GAMMA: f64 = 0.98;
/// Lower bounds of the constrained three-maze benchmark.
pub const THREE_MAZE_LOWER: [f64; 3] = [5.0, 50.0, 500.0];

/// The three-task 10×10 benchmark.
///
/// A wall fills column 5 except for four one-cell bridges at rows 1–4
/// (bridge 1 on top). Start is the top-left corner, goal the top-right.
/// Each task prefers a different bridge: task 1 bridge 1, task 2 bridge 2,
/// task 3 bridge 3. Bridge 4 is acceptable in all three.
pub fn three_mazes() -> MazeSpec {
    let bridge_rows = [1, 2, 3, 4];
    let walls = (0..10).filter(|r| !bridge_rows.contains(r)).map(|r| [r, 5]).collect();
    let prices = [
        [-0.1, -50.0, -500.0],
        [-5.0, -1.0, -500.0],
        [-5.0, -50.0, -10.0],
        [-1.0, -10.0, -100.0],
    ];
    let bridges = bridge_rows
        .iter()
        .zip(prices)
        .map(|(&r, p)| Bridge { cells: vec![[r, 5]], rewards: p.to_vec() })
        .collect();
    MazeSpec {
        grid: [10, 10],
        walls,
        bridges,
        start: [0, 0],
        goal: [0, 9],
        goal_bonus: vec![10.0, 100.0, 1000.0],
        move_reward: vec![-0.1, -1.0, -10.0],
    }
}

/// The benchmark as a JSON-ready document.
pub fn three_maze_document(constrained: bool) -> MazeDocument {
    let bounds = if constrained {
        Bounds::lower_only(THREE_MAZE_LOWER.to_vec())
    } else {
        Bounds::unconstrained(3)
    };
    MazeDocument::new(three_mazes(), THREE_MAZE_GAMMA, None, &bounds, 1.0)
}
