//! Experiment configuration: one TOML file drives every subcommand, and each
//! run writes the fully resolved version next to its outputs.

use std::path::{Path, PathBuf};

use promo_core::env::{BehaviorPolicyConfig, Env, EnvConfig};
use promo_core::eval::SimConfig;
use promo_core::model::HyperParams;
use promo_core::money::Cents;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SNAPSHOT_FILE: &str = "config.resolved.toml";

fn default_users() -> usize {
    5_000
}

fn default_budget() -> f64 {
    0.87
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for data generation; `--seed` also overrides the training and simulation seeds.
    #[serde(default)]
    pub seed: u64,
    /// Users simulated by `generate-data`.
    #[serde(default = "default_users")]
    pub users: usize,
    /// Average cost per decision, in currency units.
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default = "EnvConfig::standard")]
    pub env: EnvConfig,
    /// Logging policy; defaults to the standard table perturbed at `hyper.epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<BehaviorPolicyConfig>,
    /// Filled in by the snapshot writer; ignored when loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunRecord>,
}

/// What produced a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            users: default_users(),
            budget: default_budget(),
            hyper: HyperParams::default(),
            sim: SimConfig::default(),
            env: EnvConfig::standard(),
            behavior: None,
            run: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = read_to_string(path)?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::config(path, e.message().to_string()))?;
        cfg.run = None;
        Ok(cfg)
    }

    /// Sets every seed in the experiment.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.hyper.seed = seed;
        self.sim.seed = seed;
    }

    pub fn budget_cents(&self) -> Result<Cents, CliError> {
        if !self.budget.is_finite() || self.budget <= 0.0 {
            return Err(CliError::value("budget", format!("{} is not a positive amount", self.budget)));
        }
        Ok(Cents::from_units(self.budget))
    }

    /// Checks every value and fills in the behavior table.
    pub fn resolve(mut self) -> Result<(Self, Env), CliError> {
        let env = Env::new(self.env.clone()).map_err(|e| CliError::value("env", e.to_string()))?;
        self.hyper.validate().map_err(|e| CliError::value("hyper", e.to_string()))?;
        self.budget_cents()?;
        if self.users == 0 {
            return Err(CliError::value("users", "must be positive".into()));
        }
        if self.sim.n_days == 0 || self.sim.arrivals_per_day == 0 {
            return Err(CliError::value("sim", "n_days and arrivals_per_day must be positive".into()));
        }
        let behavior = self
            .behavior
            .take()
            .unwrap_or_else(|| BehaviorPolicyConfig::standard(env.n_segments(), env.actions(), self.hyper.epsilon));
        behavior.validate(env.n_segments(), env.actions()).map_err(|e| CliError::value("behavior", e.to_string()))?;
        self.behavior = Some(behavior);
        Ok((self, env))
    }

    pub fn behavior(&self) -> &BehaviorPolicyConfig {
        self.behavior.as_ref().expect("resolved config has a behavior table")
    }

    pub fn write_snapshot(&self, dir: &Path, run: RunRecord) -> Result<(), CliError> {
        let snapshot = ExperimentConfig { run: Some(run), ..self.clone() };
        let text = toml::to_string_pretty(&snapshot).map_err(|e| CliError::Other(format!("config snapshot: {e}")))?;
        write(&dir.join(SNAPSHOT_FILE), text.as_bytes())
    }
}

/// Fails with the missing path named unless `path` exists.
pub fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    require(path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}
