use std::path::PathBuf;

use dynkin::drbsde::SolverOptions;
use dynkin::lattice::{build_tree, sample_paths, JumpSpec, NoiseLattice, TimeGrid};
use dynkin::meanfield::FixedPointConfig;
use dynkin::scenarios::ScenarioRegistry;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Experiments in the order they run.
pub const EXPERIMENTS: [&str; 5] = ["validate", "meanfield", "game", "particles", "chaos"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Tree,
    Paths,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default)]
    pub jumps: Option<JumpSpec>,
    pub backend: BackendKind,
    /// Path count, paths backend only.
    #[serde(default)]
    pub paths: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl LatticeConfig {
    pub fn grid(&self) -> dynkin::Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn jump_spec(&self) -> dynkin::Result<JumpSpec> {
        match &self.jumps {
            Some(j) => JumpSpec::new(j.marks.clone(), j.intensities.clone()),
            None => Ok(JumpSpec::none()),
        }
    }

    pub fn build(&self) -> Result<NoiseLattice, ConfigError> {
        let grid = self.grid()?;
        let jumps = self.jump_spec()?;
        Ok(match self.backend {
            BackendKind::Tree => build_tree(grid, jumps)?,
            BackendKind::Paths => {
                let paths = self
                    .paths
                    .ok_or_else(|| ConfigError::Invalid("paths backend needs `lattice.paths`".into()))?;
                let seed = self
                    .seed
                    .ok_or_else(|| ConfigError::Invalid("paths backend needs `lattice.seed`".into()))?;
                sample_paths(grid, jumps, paths, seed)?
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    /// Random deviations when the rule space is too large to enumerate.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            seed: 0,
        }
    }
}

fn default_samples() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticlesConfig {
    pub n: usize,
    pub paths: usize,
    pub seed: Option<u64>,
    #[serde(default = "default_saddle_samples")]
    pub saddle_samples: usize,
}

fn default_saddle_samples() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosRunConfig {
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub paths: usize,
    #[serde(default)]
    pub n_ref: Option<usize>,
    #[serde(default)]
    pub pair_step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub scenario: String,
    /// Parameters of the scenario family; `null` selects its defaults.
    #[serde(default)]
    pub params: Value,
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub fixed_point: FixedPointConfig,
    pub experiments: Vec<String>,
    #[serde(default)]
    pub game: GameConfig,
    #[serde(default)]
    pub particles: Option<ParticlesConfig>,
    #[serde(default)]
    pub chaos: Option<ChaosRunConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(serde_json::Error),
    Invalid(String),
    Model(dynkin::Error),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse(e) => write!(f, "malformed config: {e}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
            ConfigError::Model(e) => write!(f, "invalid config: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<dynkin::Error> for ConfigError {
    fn from(e: dynkin::Error) -> Self {
        ConfigError::Model(e)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(ConfigError::Parse)
    }

    /// Schema-level checks that need no solving.
    pub fn check(&self, registry: &ScenarioRegistry) -> Result<(), ConfigError> {
        if !registry.contains(&self.scenario) {
            return Err(dynkin::Error::UnknownScenario(self.scenario.clone()).into());
        }
        if self.experiments.is_empty() {
            return Err(ConfigError::Invalid("no experiments selected".into()));
        }
        for e in &self.experiments {
            if !EXPERIMENTS.contains(&e.as_str()) {
                return Err(ConfigError::Invalid(format!(
                    "unknown experiment `{e}`, expected one of {EXPERIMENTS:?}"
                )));
            }
        }
        let grid = self.lattice.grid()?;
        self.lattice.jump_spec()?.validate_for(&grid)?;
        self.fixed_point.validate(grid.horizon())?;
        if self.wants("particles") {
            let p = self
                .particles
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("`particles` experiment needs a `particles` section".into()))?;
            if p.seed.is_none() {
                return Err(ConfigError::Invalid("`particles.seed` is required".into()));
            }
            if p.n == 0 || p.paths == 0 {
                return Err(ConfigError::Invalid("`particles.n` and `particles.paths` must be positive".into()));
            }
        }
        if self.wants("chaos") {
            let c = self
                .chaos
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("`chaos` experiment needs a `chaos` section".into()))?;
            if c.seeds.is_empty() || c.n_grid.is_empty() {
                return Err(ConfigError::Invalid("`chaos.seeds` and `chaos.n_grid` must be non-empty".into()));
            }
            if c.n_grid.contains(&0) || c.paths == 0 {
                return Err(ConfigError::Invalid("chaos sizes must be positive".into()));
            }
        }
        registry.build(&self.scenario, &self.params)?;
        Ok(())
    }

    pub fn wants(&self, experiment: &str) -> bool {
        self.experiments.iter().any(|e| e == experiment)
    }
}
