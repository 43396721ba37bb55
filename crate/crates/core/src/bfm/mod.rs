//! The goal-conditioned behavior model: per-modality token encoders, a small
//! transformer trunk with a Gaussian head, scripted experts and DAgger
//! distillation, and checkpoint persistence.

mod checkpoint;
mod expert;
mod model;
mod pretrain;

use serde::{Deserialize, Serialize};

use crate::numgrad::{Activation, NumError};
use crate::sim::{rotate, SimError, SimParams, SimState, ACTION_DIM};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, TensorEntry, CHECKPOINT_MAGIC};
pub use expert::{expert_action, ExpertGains};
pub use model::{pack_tokens, sample_mask, Bfm, PackedTokens, TokenSet};
pub use pretrain::{
    behavior_clone, dagger_pretrain, masked_validation_mse, sample_pose_target, PoseTarget, PretrainConfig,
    PretrainOutcome, PretrainRow,
};

/// Width of the proprioceptive state vector fed to the state encoder.
pub const PROPRIO_DIM: usize = 13;
/// Width of a pose-goal token's feature vector: six values and three presence flags.
pub const GOAL_FEATURES: usize = 9;
/// The lookahead horizons (control steps) a pose goal can carry.
pub const LOOKAHEADS: [usize; 3] = [5, 15, 30];

#[derive(Debug, thiserror::Error)]
pub enum BfmError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint hash mismatch: manifest {expected}, blobs {actual}")]
    Hash { expected: String, actual: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Hidden widths of the state and pose-goal encoders.
    pub encoder_hidden: Vec<usize>,
    pub activation: Activation,
    /// Probability that each goal component survives masking during pretraining.
    pub mask_keep_prob: f64,
    /// Probability that the surviving components share one token instead of
    /// one token each.
    pub pack_prob: f64,
    /// Initial value of the shared, state-independent log standard deviation.
    pub init_log_std: f64,
    pub action_dim: usize,
}

impl Default for BfmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_width: 128,
            encoder_hidden: vec![64],
            activation: Activation::Tanh,
            mask_keep_prob: 0.7,
            pack_prob: 0.25,
            init_log_std: -1.2,
            action_dim: ACTION_DIM,
        }
    }
}

impl BfmConfig {
    pub fn validate(&self) -> Result<(), BfmError> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(BfmError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.action_dim != ACTION_DIM {
            return Err(BfmError::Config(format!(
                "action_dim must be {ACTION_DIM}, got {}",
                self.action_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_keep_prob) || !(0.0..=1.0).contains(&self.pack_prob) {
            return Err(BfmError::Config("mask probabilities must lie in [0, 1]".into()));
        }
        if self.layers == 0 {
            return Err(BfmError::Config("trunk needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Egocentric pose target: where the base should be, which way it should face
/// and how the arm should be posed, `lookahead` control steps from now.
///
/// Each component is optional so that a token can carry any subset of them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseGoal {
    /// Target base position relative to the base, in the body frame.
    pub position: Option<[f64; 2]>,
    /// Target heading as a body-frame unit vector.
    pub heading: Option<[f64; 2]>,
    /// Target joint angles `(q1*, q2*)`.
    pub posture: Option<[f64; 2]>,
    pub lookahead: usize,
}

impl PoseGoal {
    pub fn full(position: [f64; 2], heading: [f64; 2], posture: [f64; 2], lookahead: usize) -> Self {
        Self {
            position: Some(position),
            heading: Some(heading),
            posture: Some(posture),
            lookahead,
        }
    }

    /// Index of `lookahead` in [`LOOKAHEADS`].
    pub fn lookahead_index(&self) -> Result<usize, BfmError> {
        LOOKAHEADS
            .iter()
            .position(|&k| k == self.lookahead)
            .ok_or_else(|| BfmError::Config(format!("lookahead {} not in {LOOKAHEADS:?}", self.lookahead)))
    }

    /// `[px, py, hx, hy, q1, q2, has_position, has_heading, has_posture]`;
    /// absent components contribute zeros.
    pub fn features(&self) -> [f64; GOAL_FEATURES] {
        let p = self.position.unwrap_or([0.0; 2]);
        let h = self.heading.unwrap_or([0.0; 2]);
        let q = self.posture.unwrap_or([0.0; 2]);
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        [
            p[0],
            p[1],
            h[0],
            h[1],
            q[0],
            q[1],
            flag(self.position.is_some()),
            flag(self.heading.is_some()),
            flag(self.posture.is_some()),
        ]
    }

    /// Keeps only the components selected by `keep = [position, heading, posture]`.
    pub fn restricted(&self, keep: [bool; 3]) -> Self {
        Self {
            position: self.position.filter(|_| keep[0]),
            heading: self.heading.filter(|_| keep[1]),
            posture: self.posture.filter(|_| keep[2]),
            lookahead: self.lookahead,
        }
    }

    pub fn component_count(&self) -> usize {
        [self.position.is_some(), self.heading.is_some(), self.posture.is_some()]
            .iter()
            .filter(|b| **b)
            .count()
    }

    /// Re-expresses a world-frame target against the current base pose.
    pub fn from_world(
        state: &SimState,
        position: Option<[f64; 2]>,
        heading: Option<f64>,
        posture: Option<[f64; 2]>,
        lookahead: usize,
    ) -> Self {
        Self {
            position: position.map(|p| rotate([p[0] - state.pos[0], p[1] - state.pos[1]], -state.heading)),
            heading: heading.map(|h| [(h - state.heading).cos(), (h - state.heading).sin()]),
            posture,
            lookahead,
        }
    }
}

/// Proprioceptive input: `sin θ, cos θ`, body-frame velocity, yaw rate, joint
/// angles and rates, hand reach and height relative to the base, and two
/// reserved zeros.
pub fn proprio(state: &SimState, params: &SimParams) -> [f64; PROPRIO_DIM] {
    let v = state.body_velocity();
    let hand = state.hand_local(params);
    [
        state.heading.sin(),
        state.heading.cos(),
        v[0],
        v[1],
        state.yaw_rate,
        state.q[0],
        state.q[1],
        state.qd[0],
        state.qd[1],
        hand[0],
        hand[1],
        0.0,
        0.0,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_carry_presence_flags() {
        let g = PoseGoal {
            position: None,
            heading: Some([0.0, 1.0]),
            posture: None,
            lookahead: 15,
        };
        assert_eq!(g.features(), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.lookahead_index().unwrap(), 1);
        let bad = PoseGoal { lookahead: 7, ..g };
        assert!(bad.lookahead_index().is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = BfmConfig {
            d_model: 30,
            heads: 4,
            ..BfmConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(BfmError::Config(_))));
    }

    #[test]
    fn world_goal_is_egocentric() {
        let s = SimState {
            pos: [1.0, 1.0],
            heading: std::f64::consts::FRAC_PI_2,
            ..SimState::default()
        };
        let g = PoseGoal::from_world(&s, Some([1.0, 3.0]), Some(std::f64::consts::FRAC_PI_2), None, 5);
        let p = g.position.unwrap();
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1].abs() < 1e-12);
        let h = g.heading.unwrap();
        assert!((h[0] - 1.0).abs() < 1e-12 && h[1].abs() < 1e-12);
    }
}
