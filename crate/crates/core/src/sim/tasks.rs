//! The five task environments: goal sampling, egocentric goal features, shaped
//! rewards and the success predicates judged over a finished episode.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    control_step, dot, norm, rotate, sub, BlockState, EpisodeTrace, SimError, SimParams, SimState, TraceStep,
    ACTION_DIM,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Direction,
    Steering,
    Reach,
    Strike,
    Dash,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [Self::Direction, Self::Steering, Self::Reach, Self::Strike, Self::Dash];

    /// Width of the egocentric goal feature vector.
    pub fn goal_dim(self) -> usize {
        match self {
            Self::Direction => 3,
            Self::Steering => 5,
            Self::Reach => 4,
            Self::Strike => 5,
            Self::Dash => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Direction => "direction",
            Self::Steering => "steering",
            Self::Reach => "reach",
            Self::Strike => "strike",
            Self::Dash => "dash",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::Config(format!("unknown task {s:?}")))
    }
}

/// Per-episode target. Vectors and points are in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskGoal {
    Direction {
        direction: [f64; 2],
        speed: f64,
    },
    Steering {
        direction: [f64; 2],
        speed: f64,
        facing: [f64; 2],
    },
    Reach {
        target: [f64; 2],
    },
    Strike {
        block: [f64; 2],
    },
    Dash {
        axis: [f64; 2],
        origin: [f64; 2],
        line_distance: f64,
    },
}

impl TaskGoal {
    pub fn kind(&self) -> TaskKind {
        match self {
            Self::Direction { .. } => TaskKind::Direction,
            Self::Steering { .. } => TaskKind::Steering,
            Self::Reach { .. } => TaskKind::Reach,
            Self::Strike { .. } => TaskKind::Strike,
            Self::Dash { .. } => TaskKind::Dash,
        }
    }

    /// The world direction the agent is meant to face, when the task has one.
    /// Direction/Steering use the travel (resp. facing) direction; Reach and
    /// Strike use the bearing from the base to the target.
    pub fn facing_target(&self, state: &SimState) -> Option<[f64; 2]> {
        let bearing = |p: [f64; 2]| {
            let d = sub(p, state.pos);
            let n = norm(d);
            (n > 1e-9).then(|| [d[0] / n, d[1] / n])
        };
        match *self {
            Self::Direction { direction, .. } => Some(direction),
            Self::Steering { facing, .. } => Some(facing),
            Self::Reach { target } => bearing(target),
            Self::Strike { block } => bearing(block),
            Self::Dash { axis, .. } => Some(axis),
        }
    }

    /// Applies a planar rigid transform (rotation by `angle`, then translation).
    pub fn transformed(&self, angle: f64, shift: [f64; 2]) -> Self {
        let pt = |p: [f64; 2]| {
            let r = rotate(p, angle);
            [r[0] + shift[0], r[1] + shift[1]]
        };
        match *self {
            Self::Direction { direction, speed } => Self::Direction {
                direction: rotate(direction, angle),
                speed,
            },
            Self::Steering {
                direction,
                speed,
                facing,
            } => Self::Steering {
                direction: rotate(direction, angle),
                speed,
                facing: rotate(facing, angle),
            },
            Self::Reach { target } => Self::Reach { target: pt(target) },
            Self::Strike { block } => Self::Strike { block: pt(block) },
            Self::Dash {
                axis,
                origin,
                line_distance,
            } => Self::Dash {
                axis: rotate(axis, angle),
                origin: pt(origin),
                line_distance,
            },
        }
    }
}

impl SimState {
    /// Applies the same planar rigid transform as [`TaskGoal::transformed`].
    pub fn transformed(&self, angle: f64, shift: [f64; 2]) -> SimState {
        let pt = |p: [f64; 2]| {
            let r = rotate(p, angle);
            [r[0] + shift[0], r[1] + shift[1]]
        };
        let mut s = *self;
        s.pos = pt(self.pos);
        s.heading = super::wrap_angle(self.heading + angle);
        s.vel = rotate(self.vel, angle);
        if let Some(b) = &mut s.block {
            b.pos = pt(b.pos);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Episode length in control steps.
    pub horizon: usize,
    pub dash_horizon: usize,
    /// Trailing window over which Direction/Steering speed and facing are judged.
    pub measure_window_s: f64,
    /// Episodes end when the base leaves this radius around the spawn point.
    pub arena_radius: f64,
    pub corridor_half_width: f64,
    pub speed_range: [f64; 2],
    pub reach_radii: [f64; 2],
    pub strike_radii: [f64; 2],
    pub dash_line: f64,
    /// Direction only: extra reward for travelling with the back to the goal
    /// direction (`w·max(0, −cos facing error)`).
    pub backward_bonus: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 300,
            dash_horizon: 450,
            measure_window_s: 2.0,
            arena_radius: 20.0,
            corridor_half_width: 1.0,
            speed_range: [0.5, 1.5],
            reach_radii: [1.5, 3.5],
            strike_radii: [3.0, 6.0],
            dash_line: 20.0,
            backward_bonus: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn horizon_for(&self, kind: TaskKind) -> usize {
        if kind == TaskKind::Dash {
            self.dash_horizon
        } else {
            self.horizon
        }
    }

    pub fn window_steps(&self) -> usize {
        (self.measure_window_s * super::CONTROL_HZ).round() as usize
    }
}

fn unit_on_circle(rng: &mut impl Rng) -> [f64; 2] {
    let a: f64 = rng.gen_range(-PI..PI);
    [a.cos(), a.sin()]
}

fn point_in_annulus(rng: &mut impl Rng, radii: [f64; 2]) -> [f64; 2] {
    let r = rng.gen_range(radii[0] * radii[0]..=radii[1] * radii[1]).sqrt();
    let u = unit_on_circle(rng);
    [r * u[0], r * u[1]]
}

/// Samples a goal around a spawn point at the origin.
pub fn sample_goal(kind: TaskKind, rng: &mut impl Rng, cfg: &EnvConfig) -> TaskGoal {
    match kind {
        TaskKind::Direction => TaskGoal::Direction {
            direction: unit_on_circle(rng),
            speed: rng.gen_range(cfg.speed_range[0]..=cfg.speed_range[1]),
        },
        TaskKind::Steering => TaskGoal::Steering {
            direction: unit_on_circle(rng),
            speed: rng.gen_range(cfg.speed_range[0]..=cfg.speed_range[1]),
            facing: unit_on_circle(rng),
        },
        TaskKind::Reach => TaskGoal::Reach {
            target: point_in_annulus(rng, cfg.reach_radii),
        },
        TaskKind::Strike => TaskGoal::Strike {
            block: point_in_annulus(rng, cfg.strike_radii),
        },
        TaskKind::Dash => TaskGoal::Dash {
            axis: unit_on_circle(rng),
            origin: [0.0, 0.0],
            line_distance: cfg.dash_line,
        },
    }
}

/// Egocentric goal features `g_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalObservation(pub Vec<f64>);

/// Expresses the goal in the base frame: directions rotated by `−θ`,
/// points translated by `−(x, y)` then rotated by `−θ`.
///
/// Layouts: Direction `[d, v*]`; Steering `[d, f, v*]`; Reach `[p*, p* − hand]`;
/// Strike `[block, block − hand, tilt]`; Dash `[axis, distance to line,
/// lateral offset, coasting]`.
pub fn goal_observation(state: &SimState, goal: &TaskGoal, params: &SimParams) -> GoalObservation {
    let th = state.heading;
    let dir = |v: [f64; 2]| rotate(v, -th);
    let point = |p: [f64; 2]| rotate(sub(p, state.pos), -th);
    let hand = state.hand_world(params);
    let v = match *goal {
        TaskGoal::Direction { direction, speed } => {
            let d = dir(direction);
            vec![d[0], d[1], speed]
        }
        TaskGoal::Steering {
            direction,
            speed,
            facing,
        } => {
            let (d, f) = (dir(direction), dir(facing));
            vec![d[0], d[1], f[0], f[1], speed]
        }
        TaskGoal::Reach { target } => {
            let p = point(target);
            let e = dir(sub(target, hand));
            vec![p[0], p[1], e[0], e[1]]
        }
        TaskGoal::Strike { block } => {
            let p = point(block);
            let e = dir(sub(block, hand));
            let tilt = state.block.map_or(0.0, |b| b.tilt);
            vec![p[0], p[1], e[0], e[1], tilt]
        }
        TaskGoal::Dash {
            axis,
            origin,
            line_distance,
        } => {
            let a = dir(axis);
            let rel = sub(state.pos, origin);
            let along = dot(rel, axis);
            let lateral = axis[0] * rel[1] - axis[1] * rel[0];
            vec![
                a[0],
                a[1],
                line_distance - along,
                lateral,
                if state.coasting { 1.0 } else { 0.0 },
            ]
        }
    };
    GoalObservation(v)
}

/// Unsigned angle between the heading and the goal's facing target, in radians.
pub fn facing_error(state: &SimState, goal: &TaskGoal) -> f64 {
    match goal.facing_target(state) {
        Some(t) => {
            let h = [state.heading.cos(), state.heading.sin()];
            dot(h, t).clamp(-1.0, 1.0).acos()
        }
        None => 0.0,
    }
}

fn dash_progress(state: &SimState, axis: [f64; 2], origin: [f64; 2]) -> (f64, f64) {
    let rel = sub(state.pos, origin);
    (dot(rel, axis), axis[0] * rel[1] - axis[1] * rel[0])
}

/// Coast distance past the jump line (zero before the line is crossed).
pub fn coast_distance(state: &SimState, goal: &TaskGoal) -> f64 {
    match *goal {
        TaskGoal::Dash {
            axis,
            origin,
            line_distance,
        } if state.coasting => (dash_progress(state, axis, origin).0 - line_distance).max(0.0),
        _ => 0.0,
    }
}

pub const STRIKE_BONUS: f64 = 10.0;
pub const DASH_BONUS_CAP: f64 = 10.0;

/// Shaped per-step reward for the transition `prev → next`; bounded in `[0, 11]`.
pub fn task_reward(prev: &SimState, next: &SimState, goal: &TaskGoal, params: &SimParams, cfg: &EnvConfig) -> f64 {
    let r = match *goal {
        TaskGoal::Direction { direction, speed } => {
            let along = dot(next.vel, direction);
            let mut r = (-2.0 * (along - speed).abs()).exp();
            if cfg.backward_bonus > 0.0 {
                let back = -facing_error(next, goal).cos();
                r += cfg.backward_bonus * back.max(0.0);
            }
            r
        }
        TaskGoal::Steering { direction, speed, .. } => {
            let along = dot(next.vel, direction);
            (-2.0 * (along - speed).abs()).exp() + 0.5 * (-2.0 * facing_error(next, goal)).exp()
        }
        TaskGoal::Reach { target } => (-4.0 * norm(sub(next.hand_world(params), target))).exp(),
        TaskGoal::Strike { block } => {
            let shaping = (-0.5 * norm(sub(next.hand_world(params), block))).exp();
            let fell = matches!((prev.block, next.block), (Some(a), Some(b)) if !a.fallen && b.fallen);
            shaping + if fell { STRIKE_BONUS } else { 0.0 }
        }
        TaskGoal::Dash { axis, .. } => {
            if !next.coasting {
                0.5 * (dot(next.vel, axis) / 3.0).clamp(0.0, 1.0)
            } else if next.speed() == 0.0 && prev.speed() > 0.0 {
                coast_distance(next, goal).min(DASH_BONUS_CAP)
            } else {
                0.0
            }
        }
    };
    r.clamp(0.0, 11.0)
}

/// Statistics the success predicates are evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementStats {
    pub steps: usize,
    /// Samples in the trailing measurement window (full when equal to its length).
    pub window_samples: usize,
    pub window_full: bool,
    pub mean_speed_along: f64,
    pub mean_facing_error: f64,
    pub min_hand_distance: f64,
    pub block_fallen: bool,
    pub coast_distance: f64,
}

/// Incrementally folds post-step states into [`MeasurementStats`].
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    window: usize,
    along: VecDeque<f64>,
    facing: VecDeque<f64>,
    steps: usize,
    min_hand: f64,
    fallen: bool,
    coast: f64,
}

impl StatsAccumulator {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            along: VecDeque::with_capacity(window + 1),
            facing: VecDeque::with_capacity(window + 1),
            steps: 0,
            min_hand: f64::INFINITY,
            fallen: false,
            coast: 0.0,
        }
    }

    pub fn push(&mut self, next: &SimState, goal: &TaskGoal, params: &SimParams) {
        self.steps += 1;
        let along = match *goal {
            TaskGoal::Direction { direction, .. } | TaskGoal::Steering { direction, .. } => dot(next.vel, direction),
            TaskGoal::Dash { axis, .. } => dot(next.vel, axis),
            _ => 0.0,
        };
        self.along.push_back(along);
        self.facing.push_back(facing_error(next, goal));
        if self.along.len() > self.window {
            self.along.pop_front();
            self.facing.pop_front();
        }
        let target = match *goal {
            TaskGoal::Reach { target } => Some(target),
            TaskGoal::Strike { block } => Some(block),
            _ => None,
        };
        if let Some(t) = target {
            self.min_hand = self.min_hand.min(norm(sub(next.hand_world(params), t)));
        }
        self.fallen |= next.block.is_some_and(|b| b.fallen);
        self.coast = coast_distance(next, goal);
    }

    pub fn stats(&self) -> MeasurementStats {
        let n = self.along.len();
        let mean = |q: &VecDeque<f64>| {
            if q.is_empty() {
                0.0
            } else {
                q.iter().sum::<f64>() / q.len() as f64
            }
        };
        MeasurementStats {
            steps: self.steps,
            window_samples: n,
            window_full: n == self.window,
            mean_speed_along: mean(&self.along),
            mean_facing_error: mean(&self.facing),
            min_hand_distance: self.min_hand,
            block_fallen: self.fallen,
            coast_distance: self.coast,
        }
    }
}

pub const SPEED_TOLERANCE: f64 = 0.2;
pub const FACING_TOLERANCE: f64 = 45.0 * PI / 180.0;
pub const REACH_TOLERANCE: f64 = 0.2;
pub const DASH_MIN_COAST: f64 = 1.5;

impl MeasurementStats {
    /// The success predicate for each task family.
    pub fn success(&self, goal: &TaskGoal) -> bool {
        let speed_ok = |v: f64| self.window_full && (self.mean_speed_along - v).abs() <= SPEED_TOLERANCE * v;
        match *goal {
            TaskGoal::Direction { speed, .. } => speed_ok(speed),
            TaskGoal::Steering { speed, .. } => speed_ok(speed) && self.mean_facing_error <= FACING_TOLERANCE,
            TaskGoal::Reach { .. } => self.min_hand_distance <= REACH_TOLERANCE,
            TaskGoal::Strike { .. } => self.block_fallen,
            TaskGoal::Dash { .. } => self.coast_distance > DASH_MIN_COAST,
        }
    }
}

/// Re-evaluates a finished trace and applies the task's success predicate.
pub fn task_success(
    trace: &EpisodeTrace,
    goal: &TaskGoal,
    params: &SimParams,
    cfg: &EnvConfig,
) -> Result<bool, SimError> {
    if trace.termination.is_none() {
        return Err(SimError::Contract(
            "success is only defined for a finished episode".into(),
        ));
    }
    let mut acc = StatsAccumulator::new(cfg.window_steps());
    for s in &trace.steps {
        acc.push(&s.state, goal, params);
    }
    Ok(acc.stats().success(goal))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Horizon,
    OutOfArena,
    LeftCorridor,
    CoastComplete,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub termination: Option<Termination>,
    /// Success verdict, present when `done`.
    pub success: Option<bool>,
}

/// One task episode on top of the physics.
#[derive(Debug, Clone)]
pub struct TaskEnv {
    pub kind: TaskKind,
    pub params: SimParams,
    pub cfg: EnvConfig,
    state: SimState,
    goal: TaskGoal,
    start_pos: [f64; 2],
    t: usize,
    acc: StatsAccumulator,
    trace: Option<EpisodeTrace>,
    done: bool,
}

impl TaskEnv {
    pub fn new(kind: TaskKind, params: SimParams, cfg: EnvConfig) -> Result<Self, SimError> {
        params.validate()?;
        let acc = StatsAccumulator::new(cfg.window_steps());
        let goal = sample_goal(kind, &mut rand_chacha::ChaCha8Rng::from_seed_u64(0), &cfg);
        let mut env = Self {
            kind,
            params,
            cfg,
            state: SimState::default(),
            goal,
            start_pos: [0.0; 2],
            t: 0,
            acc,
            trace: None,
            done: false,
        };
        env.reset_with(goal, env.initial_state(0.0, &goal));
        Ok(env)
    }

    /// Keeps a full [`EpisodeTrace`] of subsequent episodes.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(EpisodeTrace::new(self.state));
        self
    }

    fn initial_state(&self, heading: f64, goal: &TaskGoal) -> SimState {
        SimState {
            heading,
            block: match goal {
                TaskGoal::Strike { block } => Some(BlockState::upright(*block)),
                _ => None,
            },
            ..SimState::default()
        }
    }

    /// Spawns at the origin, at rest with the arm hanging, random heading and goal.
    pub fn reset(&mut self, rng: &mut impl Rng) {
        let goal = sample_goal(self.kind, rng, &self.cfg);
        let heading = rng.gen_range(-PI..PI);
        let s = self.initial_state(heading, &goal);
        self.reset_with(goal, s);
    }

    pub fn reset_with(&mut self, goal: TaskGoal, state: SimState) {
        self.goal = goal;
        self.state = state;
        self.start_pos = state.pos;
        self.t = 0;
        self.acc = StatsAccumulator::new(self.cfg.window_steps());
        self.done = false;
        if self.trace.is_some() {
            self.trace = Some(EpisodeTrace::new(state));
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn goal(&self) -> &TaskGoal {
        &self.goal
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn trace(&self) -> Option<&EpisodeTrace> {
        self.trace.as_ref()
    }

    pub fn stats(&self) -> MeasurementStats {
        self.acc.stats()
    }

    pub fn observation(&self) -> GoalObservation {
        goal_observation(&self.state, &self.goal, &self.params)
    }

    pub fn step(&mut self, action: &[f64; ACTION_DIM]) -> Result<StepOutcome, SimError> {
        if self.done {
            return Err(SimError::Contract("step called on a finished episode".into()));
        }
        let prev = self.state;
        let (mut next, _events) = control_step(&prev, action, &self.params)?;
        let mut termination = None;
        if let TaskGoal::Dash {
            axis,
            origin,
            line_distance,
        } = self.goal
        {
            let (along, lateral) = dash_progress(&next, axis, origin);
            if !next.coasting && along >= line_distance {
                next.coasting = true;
            }
            if !next.coasting && lateral.abs() > self.cfg.corridor_half_width {
                termination = Some(Termination::LeftCorridor);
            }
            if next.coasting && next.speed() == 0.0 {
                termination = Some(Termination::CoastComplete);
            }
        } else if norm(sub(next.pos, self.start_pos)) > self.cfg.arena_radius {
            termination = Some(Termination::OutOfArena);
        }
        let reward = task_reward(&prev, &next, &self.goal, &self.params, &self.cfg);
        self.t += 1;
        if termination.is_none() && self.t >= self.cfg.horizon_for(self.kind) {
            termination = Some(Termination::Horizon);
        }
        self.state = next;
        self.acc.push(&next, &self.goal, &self.params);
        if let Some(tr) = &mut self.trace {
            tr.steps.push(TraceStep {
                state: next,
                action: *action,
                reward,
            });
            tr.termination = termination;
        }
        self.done = termination.is_some();
        let success = self.done.then(|| self.acc.stats().success(&self.goal));
        if let (Some(tr), true) = (&mut self.trace, self.done) {
            tr.stats = Some(self.acc.stats());
        }
        Ok(StepOutcome {
            reward,
            done: self.done,
            termination,
            success,
        })
    }
}

trait SeedU64 {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedU64 for rand_chacha::ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        rand::SeedableRng::seed_from_u64(seed)
    }
}
