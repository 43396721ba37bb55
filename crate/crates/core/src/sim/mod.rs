//! Fixed-timestep planar physics for a mobile base carrying a two-link arm.
//!
//! The base moves in the ground plane with heading `θ`. The arm swings in the
//! vertical plane through the heading direction; joint angles are measured from
//! the hanging-down pose, so `q = (0, 0)` puts the hand on the ground directly
//! under the shoulder.

mod tasks;
mod trace;

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub use tasks::{
    coast_distance, facing_error, goal_observation, sample_goal, task_reward, task_success, EnvConfig, GoalObservation,
    MeasurementStats, StatsAccumulator, StepOutcome, TaskEnv, TaskGoal, TaskKind, Termination,
};
pub use trace::{EpisodeTrace, TraceStep};

pub const ACTION_DIM: usize = 5;
pub const CONTROL_HZ: f64 = 30.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("simulation error: non-finite {what} at t={time:.4}s")]
    NonFinite { what: String, time: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt_sim: f64,
    pub control_decimation: u32,
    pub base_mass: f64,
    pub base_inertia: f64,
    /// Linear ground damping coefficient, scaled by `friction_mult`.
    pub base_damping: f64,
    pub yaw_damping: f64,
    /// Largest horizontal force the ground can transmit, scaled by `friction_mult`.
    pub traction_limit: f64,
    pub force_limit: f64,
    pub yaw_torque_limit: f64,
    pub joint_torque_limits: [f64; 2],
    pub link_lengths: [f64; 2],
    pub link_masses: [f64; 2],
    pub shoulder_height: f64,
    pub joint_damping: f64,
    pub gravity: f64,
    pub friction_mult: f64,
    pub gravity_mult: f64,
    pub block_radius: f64,
    pub block_height: f64,
    /// Minimum hand approach speed for a contact to count as an impact.
    pub impact_threshold: f64,
    /// Tilt rate imparted per unit of impact speed.
    pub impact_gain: f64,
    /// Tilt beyond which the block topples instead of settling back.
    pub block_tip_angle: f64,
    pub block_stiffness: f64,
    pub block_damping: f64,
    /// Extra deceleration while coasting (Dash), scaled by `gravity_mult`.
    pub coast_decel: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt_sim: 1.0 / 120.0,
            control_decimation: 4,
            base_mass: 10.0,
            base_inertia: 2.0,
            base_damping: 4.0,
            yaw_damping: 2.0,
            traction_limit: 40.0,
            force_limit: 30.0,
            yaw_torque_limit: 10.0,
            joint_torque_limits: [15.0, 8.0],
            link_lengths: [0.5, 0.5],
            link_masses: [1.0, 0.5],
            shoulder_height: 1.0,
            joint_damping: 0.2,
            gravity: 9.81,
            friction_mult: 1.0,
            gravity_mult: 1.0,
            block_radius: 0.3,
            block_height: 1.0,
            impact_threshold: 0.5,
            impact_gain: 1.0,
            block_tip_angle: 0.3,
            block_stiffness: 10.0,
            block_damping: 1.0,
            coast_decel: 1.0,
        }
    }
}

impl SimParams {
    pub fn control_dt(&self) -> f64 {
        self.dt_sim * self.control_decimation as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.control_dt() != 1.0 / CONTROL_HZ {
            return Err(SimError::Config(format!(
                "dt_sim·control_decimation must be 1/30 s, got {}",
                self.control_dt()
            )));
        }
        if !(self.friction_mult > 0.0) {
            return Err(SimError::Config(format!(
                "friction multiplier must be positive, got {}",
                self.friction_mult
            )));
        }
        if !(self.gravity_mult >= 0.0) {
            return Err(SimError::Config(format!(
                "gravity multiplier must be non-negative, got {}",
                self.gravity_mult
            )));
        }
        if self.base_mass <= 0.0 || self.base_inertia <= 0.0 {
            return Err(SimError::Config("masses and inertias must be positive".into()));
        }
        Ok(())
    }

    /// Decoupled per-link inertias about each joint.
    pub fn link_inertias(&self) -> [f64; 2] {
        let [l1, l2] = self.link_lengths;
        let [m1, m2] = self.link_masses;
        [m1 * l1 * l1 / 3.0 + m2 * l1 * l1, m2 * l2 * l2 / 3.0]
    }

    /// Joint torques needed to hold the arm still at `q` under the scaled gravity.
    pub fn gravity_torques(&self, q: [f64; 2]) -> [f64; 2] {
        let g = self.gravity * self.gravity_mult;
        if g == 0.0 {
            return [0.0, 0.0];
        }
        let [l1, l2] = self.link_lengths;
        let [m1, m2] = self.link_masses;
        let s1 = q[0].sin();
        let s12 = (q[0] + q[1]).sin();
        let t2 = g * m2 * 0.5 * l2 * s12;
        let t1 = g * (m1 * 0.5 * l1 * s1 + m2 * l1 * s1) + t2;
        [t1, t2]
    }
}

/// Returns params with friction and gravity multipliers replaced by
/// `default × multiplier`; nothing else changes.
pub fn apply_perturbation(params: &SimParams, friction_mult: f64, gravity_mult: f64) -> Result<SimParams, SimError> {
    if !(friction_mult > 0.0) || !(gravity_mult > 0.0) {
        return Err(SimError::Config(format!(
            "perturbation multipliers must be positive, got friction {friction_mult}, gravity {gravity_mult}"
        )));
    }
    let mut p = params.clone();
    p.friction_mult = params.friction_mult * friction_mult;
    p.gravity_mult = params.gravity_mult * gravity_mult;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockState {
    pub pos: [f64; 2],
    pub tilt: f64,
    pub tilt_rate: f64,
    pub fallen: bool,
}

impl BlockState {
    pub fn upright(pos: [f64; 2]) -> Self {
        Self {
            pos,
            tilt: 0.0,
            tilt_rate: 0.0,
            fallen: false,
        }
    }
}

/// Tilt beyond which a block counts as fallen (70°).
pub const FALLEN_TILT: f64 = 70.0 * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub pos: [f64; 2],
    pub heading: f64,
    /// World-frame base velocity.
    pub vel: [f64; 2],
    pub yaw_rate: f64,
    pub q: [f64; 2],
    pub qd: [f64; 2],
    pub time: f64,
    pub block: Option<BlockState>,
    /// Control authority has been cut and the base is coasting.
    pub coasting: bool,
}

impl Default for SimState {
    fn default() -> Self {
        Self {
            pos: [0.0; 2],
            heading: 0.0,
            vel: [0.0; 2],
            yaw_rate: 0.0,
            q: [0.0; 2],
            qd: [0.0; 2],
            time: 0.0,
            block: None,
            coasting: false,
        }
    }
}

/// Wraps into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

/// Leaves in-range angles bit-exact.
fn wrap_if_needed(a: f64) -> f64 {
    if a > -PI && a <= PI {
        a
    } else {
        wrap_angle(a)
    }
}

pub fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

pub fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

pub fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl SimState {
    /// Horizontal reach of the hand ahead of the shoulder and its height above ground.
    pub fn hand_local(&self, params: &SimParams) -> [f64; 2] {
        let [l1, l2] = params.link_lengths;
        let (q1, q12) = (self.q[0], self.q[0] + self.q[1]);
        [
            l1 * q1.sin() + l2 * q12.sin(),
            params.shoulder_height - l1 * q1.cos() - l2 * q12.cos(),
        ]
    }

    /// Ground-plane position of the hand.
    pub fn hand_world(&self, params: &SimParams) -> [f64; 2] {
        let r = self.hand_local(params)[0];
        [
            self.pos[0] + r * self.heading.cos(),
            self.pos[1] + r * self.heading.sin(),
        ]
    }

    /// Base velocity in the body frame (x forward).
    pub fn body_velocity(&self) -> [f64; 2] {
        rotate(self.vel, -self.heading)
    }

    pub fn speed(&self) -> f64 {
        norm(self.vel)
    }

    pub fn kinetic_energy(&self, params: &SimParams) -> f64 {
        0.5 * params.base_mass * dot(self.vel, self.vel) + 0.5 * params.base_inertia * self.yaw_rate * self.yaw_rate
    }

    fn check_finite(&self) -> Result<(), SimError> {
        let vals = [
            ("position", self.pos[0]),
            ("position", self.pos[1]),
            ("heading", self.heading),
            ("velocity", self.vel[0]),
            ("velocity", self.vel[1]),
            ("yaw rate", self.yaw_rate),
            ("joint angle", self.q[0]),
            ("joint angle", self.q[1]),
            ("joint velocity", self.qd[0]),
            ("joint velocity", self.qd[1]),
        ];
        for (what, v) in vals {
            if !v.is_finite() {
                return Err(SimError::NonFinite {
                    what: what.into(),
                    time: self.time,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub time: f64,
    /// Hand speed toward the block centre at first contact.
    pub approach_speed: f64,
    /// Whether the approach speed exceeded the impact threshold.
    pub impact: bool,
}

/// One semi-implicit Euler step of `dt_sim`.
///
/// `action` is normalized to `[-1, 1]` per channel: body-frame base force
/// (x, y), yaw torque, shoulder and elbow torques. Values outside are clamped.
pub fn physics_substep(
    state: &SimState,
    action: &[f64; ACTION_DIM],
    params: &SimParams,
) -> Result<(SimState, Option<ContactEvent>), SimError> {
    if let Some(i) = action.iter().position(|a| !a.is_finite()) {
        return Err(SimError::NonFinite {
            what: format!("action[{i}]"),
            time: state.time,
        });
    }
    state.check_finite()?;
    let a = action.map(|x| x.clamp(-1.0, 1.0));
    let dt = params.dt_sim;
    let mu = params.friction_mult;
    let mut s = *state;

    // base
    let (fb, yaw_torque) = if state.coasting {
        ([0.0, 0.0], 0.0)
    } else {
        (
            [a[0] * params.force_limit, a[1] * params.force_limit],
            a[2] * params.yaw_torque_limit,
        )
    };
    let mut f = rotate(fb, state.heading);
    let fmag = norm(f);
    let traction = mu * params.traction_limit;
    if fmag > traction {
        f = [f[0] * traction / fmag, f[1] * traction / fmag];
    }
    let m = params.base_mass;
    let mut vel = [
        state.vel[0] + dt * (f[0] - mu * params.base_damping * state.vel[0]) / m,
        state.vel[1] + dt * (f[1] - mu * params.base_damping * state.vel[1]) / m,
    ];
    if state.coasting {
        let speed = norm(vel);
        let dv = params.gravity_mult * params.coast_decel * dt;
        vel = if speed <= dv {
            [0.0, 0.0]
        } else {
            [vel[0] * (1.0 - dv / speed), vel[1] * (1.0 - dv / speed)]
        };
    }
    s.vel = vel;
    s.pos = [state.pos[0] + dt * vel[0], state.pos[1] + dt * vel[1]];
    s.yaw_rate = state.yaw_rate + dt * (yaw_torque - mu * params.yaw_damping * state.yaw_rate) / params.base_inertia;
    s.heading = wrap_if_needed(state.heading + dt * s.yaw_rate);

    // arm
    let tau = if state.coasting {
        [0.0, 0.0]
    } else {
        [
            a[3] * params.joint_torque_limits[0],
            a[4] * params.joint_torque_limits[1],
        ]
    };
    let grav = params.gravity_torques(state.q);
    let inertia = params.link_inertias();
    for j in 0..2 {
        let acc = (tau[j] - grav[j] - params.joint_damping * state.qd[j]) / inertia[j];
        s.qd[j] = state.qd[j] + dt * acc;
        s.q[j] = wrap_if_needed(state.q[j] + dt * s.qd[j]);
    }
    s.time = state.time + dt;

    // block
    let mut event = None;
    if let Some(block) = state.block {
        let mut b = block;
        let before = state.hand_world(params);
        let after = s.hand_world(params);
        let inside = |st: &SimState, h: [f64; 2]| {
            norm(sub(h, block.pos)) < params.block_radius && st.hand_local(params)[1] <= params.block_height
        };
        if !inside(state, before) && inside(&s, after) {
            let to_block = sub(block.pos, before);
            let dist = norm(to_block).max(1e-12);
            let hv = [(after[0] - before[0]) / dt, (after[1] - before[1]) / dt];
            let approach = dot(hv, to_block) / dist;
            let impact = approach > params.impact_threshold;
            if impact && !b.fallen {
                b.tilt_rate += params.impact_gain * approach;
            }
            event = Some(ContactEvent {
                time: s.time,
                approach_speed: approach,
                impact,
            });
        }
        let g = params.gravity_mult;
        let acc =
            g * params.block_stiffness * (b.tilt - params.block_tip_angle).sin() - params.block_damping * b.tilt_rate;
        b.tilt_rate += dt * acc;
        b.tilt += dt * b.tilt_rate;
        if b.tilt <= 0.0 {
            b.tilt = 0.0;
            b.tilt_rate = b.tilt_rate.max(0.0);
        }
        if b.tilt >= PI / 2.0 {
            b.tilt = PI / 2.0;
            b.tilt_rate = 0.0;
        }
        b.fallen = b.fallen || b.tilt > FALLEN_TILT;
        s.block = Some(b);
    }
    s.check_finite()?;
    Ok((s, event))
}

/// Holds `action` for `control_decimation` substeps (one 30 Hz control tick).
pub fn control_step(
    state: &SimState,
    action: &[f64; ACTION_DIM],
    params: &SimParams,
) -> Result<(SimState, Vec<ContactEvent>), SimError> {
    let mut s = *state;
    let mut events = Vec::new();
    for _ in 0..params.control_decimation {
        let (next, ev) = physics_substep(&s, action, params)?;
        s = next;
        events.extend(ev);
    }
    Ok((s, events))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hanging_arm_at_rest_is_equilibrium() {
        let p = SimParams::default();
        let s0 = SimState {
            pos: [1.0, -2.0],
            heading: 0.7,
            ..SimState::default()
        };
        let (s1, ev) = physics_substep(&s0, &[0.0; 5], &p).unwrap();
        assert!(ev.is_none());
        let mut expect = s0;
        expect.time = p.dt_sim;
        assert_eq!(s1, expect);
    }

    #[test]
    fn constant_force_matches_discrete_recursion() {
        let p = SimParams {
            friction_mult: 0.5,
            ..SimParams::default()
        };
        let mut s = SimState::default();
        let a = [0.5, 0.0, 0.0, 0.0, 0.0];
        let n = 200;
        for _ in 0..n {
            s = physics_substep(&s, &a, &p).unwrap().0;
        }
        // v_n = (f/c)(1 − (1 − c·dt/m)^n) with c = μ·c_damp
        let f = (0.5 * p.force_limit).min(p.friction_mult * p.traction_limit);
        let c = p.friction_mult * p.base_damping;
        let r = 1.0 - c * p.dt_sim / p.base_mass;
        let oracle = f / c * (1.0 - r.powi(n));
        assert!((s.vel[0] - oracle).abs() < 1e-10, "{} vs {oracle}", s.vel[0]);
        let undamped = f * n as f64 * p.dt_sim / p.base_mass;
        assert!(s.vel[0] < undamped);
    }

    #[test]
    fn zero_gravity_means_zero_gravity_torque() {
        let p = SimParams {
            gravity_mult: 0.0,
            ..SimParams::default()
        };
        for q in [[0.3, 1.2], [-2.0, 0.5], [3.0, -3.0]] {
            assert_eq!(p.gravity_torques(q), [0.0, 0.0]);
        }
    }

    #[test]
    fn control_step_is_four_substeps() {
        let p = SimParams::default();
        let s0 = SimState {
            vel: [0.3, -0.1],
            q: [0.4, -0.2],
            ..SimState::default()
        };
        let a = [0.2, -0.7, 0.5, 0.1, -0.3];
        let (s4, _) = control_step(&s0, &a, &p).unwrap();
        let mut s = s0;
        for _ in 0..4 {
            s = physics_substep(&s, &a, &p).unwrap().0;
        }
        assert_eq!(s, s4);
        assert!((s4.time - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn nan_action_is_reported() {
        let p = SimParams::default();
        let err = physics_substep(&SimState::default(), &[0.0, f64::NAN, 0.0, 0.0, 0.0], &p).unwrap_err();
        assert!(matches!(err, SimError::NonFinite { .. }));
        assert!(err.to_string().contains("action[1]"));
    }

    #[test]
    fn perturbation_scales_only_multipliers() {
        let p = SimParams::default();
        assert_eq!(apply_perturbation(&p, 1.0, 1.0).unwrap(), p);
        let f = apply_perturbation(&p, 0.4, 1.0).unwrap();
        assert_eq!(f.friction_mult, 0.4);
        assert_eq!(
            SimParams {
                friction_mult: 1.0,
                ..f.clone()
            },
            p
        );
        let g = apply_perturbation(&p, 1.0, 1.5).unwrap();
        assert_eq!(g.gravity_mult, 1.5);
        assert!(matches!(apply_perturbation(&p, 0.0, 1.0), Err(SimError::Config(_))));
        assert!(matches!(apply_perturbation(&p, 1.0, -1.0), Err(SimError::Config(_))));
    }

    #[test]
    fn control_period_is_exact() {
        assert!(SimParams::default().validate().is_ok());
        let bad = SimParams {
            control_decimation: 3,
            ..SimParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_through_block_emits_one_impact() {
        // Base drives straight at the block with the arm hanging, so the hand
        // sits under the shoulder. Geometric oracle: the hand path is the
        // x-axis, the block circle is entered once, at x = bx − r.
        let p = SimParams::default();
        let bx = 2.0;
        let mut s = SimState {
            vel: [1.5, 0.0],
            block: Some(BlockState::upright([bx, 0.0])),
            ..SimState::default()
        };
        let a = [0.2, 0.0, 0.0, 0.0, 0.0];
        let mut events = Vec::new();
        let mut path = vec![s.hand_world(&p)];
        for _ in 0..60 {
            let (n, ev) = control_step(&s, &a, &p).unwrap();
            s = n;
            events.extend(ev);
        }
        let mut o = SimState {
            vel: [1.5, 0.0],
            ..SimState::default()
        };
        let mut oracle_entries = 0;
        let mut oracle_speed = 0.0;
        for _ in 0..240 {
            let prev = o;
            o = physics_substep(&o, &a, &p).unwrap().0;
            path.push(o.hand_world(&p));
            let d0 = (bx - prev.pos[0]).hypot(prev.pos[1]);
            let d1 = (bx - o.pos[0]).hypot(o.pos[1]);
            if d0 >= p.block_radius && d1 < p.block_radius {
                oracle_entries += 1;
                oracle_speed = (o.pos[0] - prev.pos[0]) / p.dt_sim;
            }
        }
        assert_eq!(oracle_entries, 1);
        assert_eq!(events.len(), 1, "{events:?}");
        assert!(events[0].impact);
        assert!((events[0].approach_speed - oracle_speed).abs() < 1e-9);
        assert!(s.block.unwrap().tilt > 0.0 || s.block.unwrap().fallen);
    }

    #[test]
    fn kinetic_energy_non_increasing_without_action() {
        let p = SimParams::default();
        let mut s = SimState {
            vel: [2.0, -1.0],
            yaw_rate: 1.5,
            ..SimState::default()
        };
        let mut ke = s.kinetic_energy(&p);
        for _ in 0..500 {
            s = physics_substep(&s, &[0.0; 5], &p).unwrap().0;
            let k = s.kinetic_energy(&p);
            assert!(k <= ke);
            ke = k;
        }
    }
}
