//! The TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{Mode, PolicyConfig};
use crate::bfm::{BfmConfig, PretrainConfig};
use crate::eval::{AblationSpec, EvalSetup, SweepGrid};
use crate::ppo::{PpoConfig, TrainSetup};
use crate::sim::{EnvConfig, SimParams, TaskKind};
use crate::Error;

/// Environment variable that, when set, replaces `io.output`. Nothing else
/// can be overridden from the environment.
pub const OUTPUT_ENV: &str = "TASKTOKENS_OUTPUT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub physics: SimParams,
    pub episode: EnvConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfmSection {
    pub model: BfmConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Episodes per seed.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub sweep: SweepGrid,
    pub ablation: AblationSpec,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 256,
            seeds: vec![0, 1, 2, 3, 4],
            sweep: SweepGrid::default(),
            ablation: AblationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    /// Root under which each run gets its own subdirectory.
    pub output: PathBuf,
    /// Pretrained behavior model used by train / eval / sweep / ablate.
    pub bfm_checkpoint: Option<PathBuf>,
    /// Trained policy evaluated by eval / sweep.
    pub policy_checkpoint: Option<PathBuf>,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs"),
            bfm_checkpoint: None,
            policy_checkpoint: None,
        }
    }
}

/// Every knob of a run. Missing sections take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimSection,
    pub bfm: BfmSection,
    pub adapter: PolicyConfig,
    pub ppo: PpoConfig,
    pub eval: EvalSection,
    pub io: IoSection,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml_string(&self) -> Result<String, Error> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Applies [`OUTPUT_ENV`] if it is set and non-empty.
    pub fn with_env_output(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            self.io.output = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.sim.physics.validate()?;
        self.bfm.model.validate()?;
        self.adapter.prompt.validate()?;
        self.ppo.validate()?;
        self.eval.sweep.validate()?;
        if self.eval.episodes == 0 || self.eval.seeds.is_empty() {
            return Err(Error::Config("eval needs at least one episode and one seed".into()));
        }
        Ok(())
    }

    pub fn train_setup(&self, mode: Mode, task: TaskKind, seed: u64) -> TrainSetup {
        TrainSetup {
            mode,
            task,
            ppo: self.ppo.clone(),
            policy: self.adapter.clone(),
            sim: self.sim.physics.clone(),
            env: self.sim.episode.clone(),
            seed,
        }
    }

    pub fn eval_setup(&self, task: TaskKind) -> EvalSetup {
        EvalSetup {
            task,
            params: self.sim.physics.clone(),
            env: self.sim.episode.clone(),
        }
    }
}
