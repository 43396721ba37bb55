//! Dense arrays, reverse-mode differentiation and the neural blocks built on them.

mod dist;
mod fdcheck;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use dist::{gaussian_entropy, gaussian_logprob, GaussianDist, LOG_STD_MAX, LOG_STD_MIN};
pub use fdcheck::{finite_diff_check, relative_error, FdReport, REL_ERR_FLOOR};
pub use nn::{mha_forward, mlp_forward, Activation, AttentionBlock, BlockVars, Linear, Mlp};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}
