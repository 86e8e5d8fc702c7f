//! Run configuration: one JSON document describing the world, the covariate
//! space, the policies and the estimator options.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pgae_core::design::CapRule;
use pgae_core::harness::{PredictorSource, DEFAULT_ORACLE_DRAWS};
use pgae_core::population::{load_population, PopulationSchema};
use pgae_core::{CovariateSpace, EstimatorOptions, PolicySpec, SyntheticDgp, VarianceComponents, World};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "PGAE_SEED";
pub const OUTPUT_DIR_ENV: &str = "PGAE_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldConfig {
    Synthetic(SyntheticDgp),
    Population(PopulationConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    /// CSV file; relative paths resolve against the config file's directory.
    pub file: PathBuf,
    pub schema: PopulationSchema,
    pub predictor: PredictorSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceConfig {
    Grid { lo: f64, hi: f64, m: usize },
    Strata { labels: Vec<String>, q: Vec<f64> },
}

impl SpaceConfig {
    pub fn build(&self) -> pgae_core::Result<CovariateSpace> {
        match self {
            SpaceConfig::Grid { lo, hi, m } => CovariateSpace::grid(*lo, *hi, *m),
            SpaceConfig::Strata { labels, q } => CovariateSpace::strata(labels.clone(), q.clone()),
        }
    }
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig::Grid {
            lo: -1.0,
            hi: 1.0,
            m: 50,
        }
    }
}

/// Variance components given directly instead of simulated from the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentsConfig {
    Constant { alpha: f64, beta: f64 },
    PerPoint { alpha: Vec<f64>, beta: Vec<f64> },
}

impl ComponentsConfig {
    pub fn build(&self, n: usize) -> pgae_core::Result<VarianceComponents> {
        match self {
            ComponentsConfig::Constant { alpha, beta } => VarianceComponents::constant(n, *alpha, *beta),
            ComponentsConfig::PerPoint { alpha, beta } => {
                if alpha.len() != n {
                    return Err(pgae_core::Error::Misaligned(format!(
                        "space has {n} points, components {}",
                        alpha.len()
                    )));
                }
                VarianceComponents::new(alpha.clone(), beta.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub gamma: f64,
    #[serde(default = "default_cap_rule")]
    pub cap_rule: CapRule,
}

fn default_cap_rule() -> CapRule {
    CapRule::Reoptimize
}

fn default_n_reps() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_oracle_draws() -> usize {
    DEFAULT_ORACLE_DRAWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    /// Required for synthetic worlds unless the default grid is wanted;
    /// not allowed for populations, whose strata come from the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<SpaceConfig>,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    #[serde(default = "default_n_reps")]
    pub n_reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub estimator: EstimatorOptions,
    /// Monte Carlo draws per cell for synthetic oracle components.
    #[serde(default = "default_oracle_draws")]
    pub oracle_draws: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<ComponentsConfig>,
    /// Write one row per replication to `replications.csv`.
    #[serde(default)]
    pub dump_replications: bool,
    /// Save the trace and report of the first this-many replications of each policy.
    #[serde(default)]
    pub trace_reps: usize,
}

impl RunConfig {
    /// Parses and validates; errors name the offending key and position.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative population path is rebased on the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let WorldConfig::Population(pc) = &mut cfg.world {
            if pc.file.is_relative() {
                if let Some(dir) = path.parent() {
                    pc.file = dir.join(&pc.file);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n_reps == 0 {
            return bad("n_reps must be at least 1".into());
        }
        if self.oracle_draws < 2 {
            return bad("oracle_draws must be at least 2".into());
        }
        self.estimator.validate().map_err(|e| CliError::Config(format!("estimator: {e}")))?;
        for (i, p) in self.policies.iter().enumerate() {
            p.validate().map_err(|e| CliError::Config(format!("policies[{i}]: {e}")))?;
        }
        if let Some(d) = &self.design {
            if !(d.gamma > 0.0 && d.gamma <= 1.0) {
                return bad(format!("design.gamma = {} must lie in (0, 1]", d.gamma));
            }
        }
        match &self.world {
            WorldConfig::Synthetic(dgp) => {
                dgp.validate().map_err(|e| CliError::Config(format!("world.synthetic: {e}")))?;
                let space = self.space_config().build().map_err(|e| CliError::Config(format!("space: {e}")))?;
                if self.components.is_none() {
                    dgp.true_mean(&space).map_err(|e| CliError::Config(format!("space: {e}")))?;
                }
                if let Some(c) = &self.components {
                    c.build(space.len()).map_err(|e| CliError::Config(format!("components: {e}")))?;
                }
            }
            WorldConfig::Population(pc) => {
                if self.space.is_some() {
                    return bad("space must be omitted for a population world; strata come from the file".into());
                }
                if pc.schema.covariates.is_empty() {
                    return bad("world.population.schema.covariates is empty".into());
                }
                if let PredictorSource::Pretrained { size: 0, .. } = pc.predictor {
                    return bad("world.population.predictor.size must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn space_config(&self) -> SpaceConfig {
        self.space.clone().unwrap_or_default()
    }

    /// Applies `PGAE_SEED` and `PGAE_OUTPUT_DIR`.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        if let Some(v) = std::env::var_os(OUTPUT_DIR_ENV) {
            self.output_dir = PathBuf::from(v);
        }
        Ok(())
    }

    /// The covariate space, loading the population file when needed.
    pub fn space(&self) -> Result<CovariateSpace> {
        match &self.world {
            WorldConfig::Synthetic(_) => self.space_config().build().map_err(|e| CliError::Config(e.to_string())),
            WorldConfig::Population(pc) => self.population(pc)?.space().map_err(CliError::data),
        }
    }

    fn population(&self, pc: &PopulationConfig) -> Result<pgae_core::FinitePopulation> {
        load_population(&pc.file, &pc.schema)
            .map_err(|e| CliError::Data(format!("{}: {e}", pc.file.display())))
    }

    pub fn build_world(&self) -> Result<World> {
        match &self.world {
            WorldConfig::Synthetic(dgp) => {
                let space = self.space_config().build().map_err(|e| CliError::Config(e.to_string()))?;
                Ok(World::synthetic(*dgp, space)
                    .map_err(|e| CliError::Config(e.to_string()))?
                    .with_oracle(self.oracle_draws, self.seed))
            }
            WorldConfig::Population(pc) => {
                let pop = Arc::new(self.population(pc)?);
                World::population(pop, &pc.predictor, self.seed).map_err(CliError::runtime)
            }
        }
    }
}
