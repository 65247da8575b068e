use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use feeder_dispatch::dispatch::{Algorithm, Problem, StepSchedule, StopCriteria};
use feeder_dispatch::feeder::{load_feeder, FeederModel};
use feeder_dispatch::scenario::{sample, EmpiricalSource, ScenarioParams, ScenarioSource, ScenarioSpec};
use feeder_dispatch::subproblem::SolverOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: u64,
    pub seed: u64,
    /// Buses (1-based) that get a voltage histogram file.
    pub histogram_buses: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 6000,
            seed: 20_000,
            histogram_buses: Vec::new(),
        }
    }
}

/// Run configuration file. Relative feeder paths resolve against the
/// directory holding the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub feeder: PathBuf,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub scenario: ScenarioParams,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Base step sizes; the algorithm's defaults when absent.
    #[serde(default)]
    pub steps: Option<StepSchedule>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub stop: StopCriteria,
    #[serde(default)]
    pub solver: SolverOptions,
    /// Overrides the feeder's PV surplus price, $/MWh.
    #[serde(default)]
    pub pv_price: Option<f64>,
    /// Projection box for the block purchase, MW; `[0, 2 Σ mean load]` when absent.
    #[serde(default)]
    pub p0a_box: Option<[f64; 2]>,
    /// Overrides the tight voltage region, squared pu.
    #[serde(default)]
    pub tight_region: Option<[f64; 2]>,
    /// Train on this many fixed scenarios drawn uniformly instead of fresh samples.
    #[serde(default)]
    pub scenario_pool: Option<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_seed() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if cfg.feeder.is_relative() {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            cfg.feeder = dir.join(&cfg.feeder);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.feeder.is_file() {
            bail!("invalid feeder: {} does not exist", self.feeder.display());
        }
        match self.alpha {
            None if self.algorithm.needs_alpha() => {
                bail!("invalid alpha: alpha required for algorithm {}", self.algorithm)
            }
            Some(a) if !(a > 0.0 && a <= 1.0) => bail!("invalid alpha: must lie in (0, 1], got {a}"),
            _ => {}
        }
        if let Some(steps) = &self.steps {
            steps.validate()?;
        }
        if self.stop.window == 0 || !(self.stop.tol > 0.0) {
            bail!("invalid stop: window must be at least 1 and tol positive");
        }
        if self.scenario_pool == Some(0) {
            bail!("invalid scenario_pool: must be at least 1");
        }
        Ok(())
    }

    pub fn steps(&self) -> StepSchedule {
        self.steps.unwrap_or_else(|| self.algorithm.default_steps())
    }

    pub fn model(&self) -> Result<FeederModel> {
        let mut model = load_feeder(&self.feeder)?;
        if let Some(pi) = self.pv_price {
            model = model.with_pv_price(pi)?;
        }
        if let Some([lo, hi]) = self.tight_region {
            model = model.with_tight_region(lo, hi)?;
        }
        Ok(model)
    }

    /// Feeder, scenario distribution, and the shared problem data.
    pub fn setup(&self) -> Result<(Problem, ScenarioSpec)> {
        self.validate()?;
        let model = self.model()?;
        let spec = ScenarioSpec::new(&model, &self.scenario, self.seed)?;
        let p0a = match self.p0a_box {
            Some([lo, hi]) => (lo, hi),
            None => Problem::default_p0a_box(&spec.p_load_mean),
        };
        let problem = Problem::new(model, p0a, self.solver)?;
        Ok((problem, spec))
    }

    /// Training source: the distribution itself or a fixed scenario pool.
    pub fn training_source(&self, spec: &ScenarioSpec) -> Result<Box<dyn ScenarioSource>> {
        Ok(match self.scenario_pool {
            None => Box::new(spec.clone()),
            Some(k) => Box::new(EmpiricalSource::new(
                pool(spec, k),
                spec.seed.wrapping_add(POOL_INDEX_SEED_OFFSET),
            )?),
        })
    }
}

/// Keeps pool index draws independent of the draws that built the pool.
const POOL_INDEX_SEED_OFFSET: u64 = 0x9e37_79b9;

/// The first `k` samples of `spec`.
pub fn pool(spec: &ScenarioSpec, k: usize) -> Vec<feeder_dispatch::scenario::Scenario> {
    (0..k as u64).map(|i| sample(spec, i)).collect()
}
