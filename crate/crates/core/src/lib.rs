//! Adapting a frozen, token-conditioned behavior model to new tasks by
//! learning a small task encoder whose output is one extra input token.
//!
//! The crate is split the way a run flows: [`numgrad`] (reverse-mode autodiff),
//! [`sim`] (planar robot and task suite), [`bfm`] (the behavior model and its
//! DAgger pretraining), [`adapter`] (task tokens, prompts, trainable sets),
//! [`ppo`] (adaptation) and [`eval`] (success rates, perturbation sweeps,
//! ablations). [`RunConfig`] ties them together for the command line.

// Validation is written as `!(x > 0.0)` on purpose: it rejects NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod bfm;
pub mod config;
pub mod eval;
pub mod numgrad;
pub mod ppo;
pub mod sim;

pub use adapter::{AdapterError, Mode, Policy, PolicyConfig, PriorSpec, PromptSpec, TaskEncoderConfig};
pub use bfm::{BfmConfig, BfmError, Checkpoint, PretrainConfig};
pub use config::RunConfig;
pub use eval::{EvalError, EvalSetup};
pub use numgrad::NumError;
pub use ppo::{PpoConfig, PpoError, TrainSetup};
pub use sim::{SimError, SimParams, TaskKind};

/// Any failure surfaced by a top-level operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Bfm(#[from] BfmError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config render: {0}")]
    Render(#[from] toml::ser::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
