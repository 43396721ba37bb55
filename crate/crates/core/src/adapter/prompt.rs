use serde::{Deserialize, Serialize};

use super::AdapterError;
use crate::bfm::{PoseGoal, LOOKAHEADS};
use crate::sim::{norm, sub, SimState, TaskGoal};

/// What a prior token asks of the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Heading-only token toward the task's facing target.
    Facing,
    /// Posture-only token `(q1, q2)`.
    Posture([f64; 2]),
}

/// When a prior token is part of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    #[default]
    Always,
    /// Active while the base is farther than this from the task's target
    /// point. Tasks without a target point count as infinitely far.
    DistanceAbove(f64),
    /// Active once the base is within this distance of the target point.
    DistanceBelow(f64),
}

impl Trigger {
    pub fn active(&self, distance: f64) -> bool {
        match *self {
            Self::Always => true,
            Self::DistanceAbove(d) => distance > d,
            Self::DistanceBelow(d) => distance < d,
        }
    }
}

fn default_lookahead() -> usize {
    15
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub prior: PriorKind,
    #[serde(default)]
    pub trigger: Trigger,
    #[serde(default = "default_lookahead")]
    pub lookahead: usize,
}

impl PriorSpec {
    pub fn facing() -> Self {
        Self {
            prior: PriorKind::Facing,
            trigger: Trigger::Always,
            lookahead: default_lookahead(),
        }
    }

    pub fn posture(q: [f64; 2]) -> Self {
        Self {
            prior: PriorKind::Posture(q),
            ..Self::facing()
        }
    }

    pub fn when(mut self, trigger: Trigger) -> Self {
        self.trigger = trigger;
        self
    }
}

/// User-authored prior tokens, fixed across an episode but individually
/// switched on and off by their triggers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSpec {
    pub priors: Vec<PriorSpec>,
}

/// Base-to-target distance used by triggers.
pub fn target_distance(state: &SimState, goal: &TaskGoal) -> f64 {
    match *goal {
        TaskGoal::Reach { target } => norm(sub(target, state.pos)),
        TaskGoal::Strike { block } => norm(sub(block, state.pos)),
        _ => f64::INFINITY,
    }
}

impl PromptSpec {
    pub fn new(priors: Vec<PriorSpec>) -> Self {
        Self { priors }
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        for p in &self.priors {
            if !LOOKAHEADS.contains(&p.lookahead) {
                return Err(AdapterError::Config(format!(
                    "prior lookahead {} not in {LOOKAHEADS:?}",
                    p.lookahead
                )));
            }
            match p.trigger {
                Trigger::DistanceAbove(d) | Trigger::DistanceBelow(d) if !(d.is_finite() && d >= 0.0) => {
                    return Err(AdapterError::Config(format!(
                        "trigger distance {d} must be finite and ≥ 0"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Pose-goal tokens of the priors whose triggers hold in `state`, in
    /// declaration order. A facing prior on a task without a facing target
    /// yields no token.
    pub fn active_goals(&self, state: &SimState, goal: &TaskGoal) -> Vec<PoseGoal> {
        let dist = target_distance(state, goal);
        self.priors
            .iter()
            .filter(|p| p.trigger.active(dist))
            .filter_map(|p| match p.prior {
                PriorKind::Facing => goal
                    .facing_target(state)
                    .map(|t| PoseGoal::from_world(state, None, Some(t[1].atan2(t[0])), None, p.lookahead)),
                PriorKind::Posture(q) => Some(PoseGoal {
                    position: None,
                    heading: None,
                    posture: Some(q),
                    lookahead: p.lookahead,
                }),
            })
            .collect()
    }
}
