//! Task Tokens: a small encoder maps egocentric goal features (plus optional
//! proprioception) to one extra token for the frozen trunk, alongside optional
//! user prior tokens.

mod policy;
mod prompt;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bfm::{BfmError, TokenSet, PROPRIO_DIM};
use crate::numgrad::{Activation, Mlp, NumError, ParamStore, Real, Tape, Tensor, Var};
use crate::sim::SimError;

pub use policy::{
    observe, policy_forward, trainable_parameters, BatchEval, Observation, Policy, PolicyConfig, TrainableSet,
};
pub use prompt::{PriorKind, PriorSpec, PromptSpec, Trigger};

/// Width of the proprioceptive subset the task encoder may see: body-frame
/// velocity, yaw rate and the two joint angles.
pub const POSE_FEATURES_DIM: usize = 5;

/// The current-pose subset of a proprioception vector.
pub fn pose_features(proprio: &[f64; PROPRIO_DIM]) -> [f64; POSE_FEATURES_DIM] {
    [proprio[2], proprio[3], proprio[4], proprio[5], proprio[6]]
}

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Bfm(#[from] BfmError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("config error: {0}")]
    Config(String),
}

/// Which parameters a training run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Train the task encoder against the frozen trunk.
    TaskTokens,
    /// Train the task encoder and the trunk together.
    FullFinetune,
    /// Train an MLP actor from scratch; no trunk involved.
    PurePpo,
    /// Frozen trunk driven only by prior tokens; nothing is trained.
    PromptOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Self::TaskTokens, Self::FullFinetune, Self::PurePpo, Self::PromptOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::TaskTokens => "task_tokens",
            Self::FullFinetune => "full_finetune",
            Self::PurePpo => "pure_ppo",
            Self::PromptOnly => "prompt_only",
        }
    }

    /// Whether the policy runs through the pretrained trunk.
    pub fn uses_bfm(self) -> bool {
        self != Self::PurePpo
    }

    /// Parameter-name prefixes of the actor that this mode trains.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Self::TaskTokens => &["task_encoder."],
            Self::FullFinetune => &["task_encoder.", "bfm."],
            Self::PurePpo => &["actor."],
            Self::PromptOnly => &[],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AdapterError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskEncoderConfig {
    pub hidden: Vec<usize>,
    /// Append the current-pose subset of proprioception to `g_t`.
    pub use_current_pose: bool,
    pub activation: Activation,
}

impl Default for TaskEncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            use_current_pose: true,
            activation: Activation::Tanh,
        }
    }
}

impl TaskEncoderConfig {
    /// The wide `[512, 512, 512]` encoder.
    pub fn wide() -> Self {
        Self {
            hidden: vec![512, 512, 512],
            ..Self::default()
        }
    }

    pub fn input_dim(&self, goal_dim: usize) -> usize {
        goal_dim + if self.use_current_pose { POSE_FEATURES_DIM } else { 0 }
    }
}

/// MLP from `g_t` (optionally `⊕` current-pose features) to one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEncoder {
    pub cfg: TaskEncoderConfig,
    pub goal_dim: usize,
    pub mlp: Mlp,
}

impl TaskEncoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        cfg: TaskEncoderConfig,
        goal_dim: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AdapterError> {
        let mut sizes = vec![cfg.input_dim(goal_dim)];
        sizes.extend(&cfg.hidden);
        sizes.push(d_model);
        let mlp = Mlp::new(store, "task_encoder", &sizes, cfg.activation, Activation::Identity, rng)?;
        Ok(Self { cfg, goal_dim, mlp })
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    /// `τ = MLP(g ⊕ extra)`; `extra` is ignored unless `use_current_pose`.
    pub fn encode<F: Real>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        goal: Var,
        extra: Option<Var>,
    ) -> Result<Var, AdapterError> {
        let gd = tape.value(goal).cols();
        if gd != self.goal_dim {
            return Err(AdapterError::Config(format!(
                "task encoder expects {} goal features, got {gd}",
                self.goal_dim
            )));
        }
        let x = if self.cfg.use_current_pose {
            let e = extra.ok_or_else(|| AdapterError::Config("pose features required when use_current_pose".into()))?;
            let ed = tape.value(e).cols();
            if ed != POSE_FEATURES_DIM {
                return Err(AdapterError::Config(format!(
                    "pose features must have {POSE_FEATURES_DIM} entries, got {ed}"
                )));
            }
            tape.concat_cols(&[goal, e])?
        } else {
            goal
        };
        Ok(self.mlp.forward(store, tape, x)?)
    }
}

/// Single-sample task token.
pub fn task_encode<F: Real>(
    encoder: &TaskEncoder,
    store: &ParamStore<F>,
    goal: &[f64],
    extra: Option<&[f64]>,
) -> Result<Vec<f64>, AdapterError> {
    let row = |v: &[f64]| Tensor::new(vec![1, v.len()], v.iter().map(|x| F::of(*x)).collect());
    let mut tape = Tape::new();
    let g = tape.constant(row(goal)?)?;
    let e = match extra {
        Some(e) => Some(tape.constant(row(e)?)?),
        None => None,
    };
    let t = encoder.encode(store, &mut tape, g, e)?;
    Ok(tape.value(t).to_f64_vec())
}

/// `priors ++ [τ] ++ [state]`; `τ` is absent in prompt-only use.
pub fn assemble_tokens(priors: Vec<Vec<f64>>, tau: Option<Vec<f64>>, state_token: Vec<f64>) -> TokenSet {
    let mut goal_tokens = priors;
    goal_tokens.extend(tau);
    TokenSet::new(goal_tokens, state_token)
}
