//! Run configuration: JSON ingestion with JSON-pointer error locations,
//! validation, and resolution into ready-to-run parameters.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{lazy_metropolis, GraphPreset, GraphSpec, WeightMatrix};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::lfa::FeatureSpec;
use crate::maze::{three_maze_document, GridWorld, MazeDocument};
use crate::pdnpg::Mode;
use crate::problem::MultiTaskProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pdnpg,
    Pdnac,
    Lfa,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pdnpg => "pdnpg",
            Algorithm::Pdnac => "pdnac",
            Algorithm::Lfa => "lfa",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ThreeMazes,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSource {
    Preset {
        name: Preset,
        #[serde(default = "yes")]
        constrained: bool,
    },
    Maze(MazeDocument),
    Inline(MultiTaskProblem),
}

/// Where the optimal `V₀` for the gap column comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OracleSpec {
    Value(f64),
    Named(OracleKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Auto,
    None,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec::Named(OracleKind::Auto)
    }
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must match the subcommand when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    pub problem: ProblemSource,
    /// Defaults to a ring over the tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    /// Defaults to `alpha_scale · √(1 − σ₂)/N^{1/4}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha0: Option<f64>,
    #[serde(default = "one")]
    pub alpha_scale: f64,
    #[serde(default = "one")]
    pub eta0: f64,
    #[serde(default = "one")]
    pub beta0: f64,
    #[serde(default = "one")]
    pub eps0: f64,
    /// Defaults to `1/(4|S|)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_lower: Option<f64>,
    #[serde(default = "one_usize")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eps_max: f64,
    #[serde(default = "default_features")]
    pub features: FeatureSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub execution: Execution,
}

fn default_features() -> FeatureSpec {
    FeatureSpec::Identity
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    out
}

/// SHA-256 of the raw config bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A validated config with its problem and network built.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub hash: String,
    pub problem: MultiTaskProblem,
    /// Present when the problem came from a maze.
    pub world: Option<GridWorld>,
    pub weights: WeightMatrix,
}

impl RunConfig {
    /// Parses and type-checks; errors carry the JSON pointer of the
    /// offending value.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_slice(bytes);
        let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let at = pointer(e.path());
            Error::config(if at.is_empty() { "/".into() } else { at }, e.into_inner().to_string())
        })?;
        de.end().map_err(|e| Error::config("/", e.to_string()))?;
        Ok(config)
    }

    fn validate(&self, algorithm: Algorithm) -> Result<()> {
        if let Some(a) = self.algorithm {
            if a != algorithm {
                return Err(Error::config(
                    "/algorithm",
                    format!("config is for {}, subcommand runs {}", a.name(), algorithm.name()),
                ));
            }
        }
        if self.k == 0 {
            return Err(Error::config("/K", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("/eval_every", "must be at least 1"));
        }
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("/{name}"), format!("must be positive and finite, got {x}")))
            }
        };
        if let Some(a) = self.alpha0 {
            positive("alpha0", a)?;
        }
        positive("alpha_scale", self.alpha_scale)?;
        positive("eta0", self.eta0)?;
        if algorithm != Algorithm::Pdnpg {
            positive("beta0", self.beta0)?;
            positive("eps0", self.eps0)?;
        }
        if let Some(m) = self.mu_lower {
            if !(m > 0.0 && m <= 1.0) {
                return Err(Error::config("/mu_lower", "must lie in (0, 1]"));
            }
        }
        if !(self.eps_max >= 0.0 && self.eps_max.is_finite()) {
            return Err(Error::config("/eps_max", "must be nonnegative"));
        }
        if algorithm == Algorithm::Lfa {
            if self.t == Some(0) {
                return Err(Error::config("/T", "must be at least 1"));
            }
            if self.mode == Mode::Central {
                return Err(Error::config("/mode", "lfa runs over the network only"));
            }
        }
        if let OracleSpec::Value(v) = self.oracle {
            if !v.is_finite() {
                return Err(Error::config("/oracle", "must be finite"));
            }
        }
        Ok(())
    }

    /// Validates against `algorithm` and builds the problem and weights.
    pub fn resolve(self, algorithm: Algorithm, hash: String) -> Result<ResolvedConfig> {
        self.validate(algorithm)?;
        let (problem, world) = match &self.problem {
            ProblemSource::Preset { name: Preset::ThreeMazes, constrained } => {
                let world = three_maze_document(*constrained).build().map_err(|e| Error::config("/problem", e.to_string()))?;
                (world.problem.clone(), Some(world))
            }
            ProblemSource::Maze(doc) => {
                let world = doc.build().map_err(|e| Error::config("/problem/maze", e.to_string()))?;
                (world.problem.clone(), Some(world))
            }
            ProblemSource::Inline(p) => (p.clone(), None),
        };
        let n = problem.n_tasks();
        let graph_spec = self.graph.clone().unwrap_or(GraphSpec::Preset { preset: GraphPreset::Ring, n });
        let graph = graph_spec.build().map_err(|e| Error::config("/graph", e.to_string()))?;
        if graph.n_nodes() != n {
            return Err(Error::config("/graph", format!("{} agents for {n} tasks", graph.n_nodes())));
        }
        let weights = lazy_metropolis(&graph).map_err(|e| Error::config("/graph", e.to_string()))?;
        Ok(ResolvedConfig { config: self, hash, problem, world, weights })
    }
}

impl ResolvedConfig {
    /// Reads, hashes and resolves a config; `seed_override` replaces the
    /// seed (the hash still covers the file bytes).
    pub fn load(bytes: &[u8], algorithm: Algorithm, seed_override: Option<u64>) -> Result<Self> {
        let mut config = RunConfig::from_json(bytes)?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        config.resolve(algorithm, config_hash(bytes))
    }

    pub fn n_agents(&self) -> usize {
        match self.config.mode {
            Mode::Central => 1,
            Mode::Decentral => self.problem.n_tasks(),
        }
    }

    pub fn sigma2(&self) -> f64 {
        match self.config.mode {
            Mode::Central => 0.0,
            Mode::Decentral => self.weights.sigma2(),
        }
    }

    pub fn alpha0(&self) -> f64 {
        self.config
            .alpha0
            .unwrap_or_else(|| crate::pdnpg::default_alpha0(self.config.alpha_scale, self.sigma2(), self.n_agents()))
    }

    pub fn mu_lower(&self) -> f64 {
        self.config.mu_lower.unwrap_or(1.0 / (4.0 * self.problem.n_states() as f64))
    }
}

/// Reads `CMTRL_SEED` if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("CMTRL_SEED") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::config("/seed", format!("CMTRL_SEED='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
