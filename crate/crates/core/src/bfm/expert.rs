use serde::{Deserialize, Serialize};

use super::PoseGoal;
use crate::sim::{norm, wrap_angle, SimParams, SimState, ACTION_DIM, CONTROL_HZ};

/// Gains of the scripted cascade controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertGains {
    /// Position-loop time constant is `pos_time_base + lookahead·dt·pos_time_per_step`.
    pub pos_time_base: f64,
    pub pos_time_per_step: f64,
    pub max_speed: f64,
    /// Velocity-loop bandwidth (1/s).
    pub vel_bandwidth: f64,
    pub heading_gain: f64,
    pub max_yaw_rate: f64,
    pub yaw_bandwidth: f64,
    /// Natural frequency of the joint PD loops (rad/s).
    pub arm_frequency: f64,
}

impl Default for ExpertGains {
    fn default() -> Self {
        Self {
            pos_time_base: 0.2,
            pos_time_per_step: 0.25,
            max_speed: 3.0,
            vel_bandwidth: 10.0,
            heading_gain: 4.0,
            max_yaw_rate: 4.0,
            yaw_bandwidth: 12.0,
            arm_frequency: 8.0,
        }
    }
}

impl ExpertGains {
    pub fn position_gain(&self, lookahead: usize) -> f64 {
        1.0 / (self.pos_time_base + lookahead as f64 / CONTROL_HZ * self.pos_time_per_step)
    }
}

fn clamp_norm(v: [f64; 2], max: f64) -> [f64; 2] {
    let n = norm(v);
    if n > max {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

/// Cascade PD expert tracking a pose goal, in normalized action units.
///
/// Base: desired velocity `clamp(k_p·p_rel, v_max)` tracked by a force loop
/// with damping feed-forward. Yaw: the same pattern on heading error. Arm: joint
/// PD with gravity and damping compensation. Missing components mean "stop
/// translating", "stop turning" and "hold the current posture" respectively.
pub fn expert_action(state: &SimState, goal: &PoseGoal, params: &SimParams, gains: &ExpertGains) -> [f64; ACTION_DIM] {
    let mu = params.friction_mult;
    let vb = state.body_velocity();

    let v_des = match goal.position {
        Some(p) => {
            let k = gains.position_gain(goal.lookahead);
            clamp_norm([k * p[0], k * p[1]], gains.max_speed)
        }
        None => [0.0, 0.0],
    };
    let m = params.base_mass;
    let c = mu * params.base_damping;
    let force = [
        m * gains.vel_bandwidth * (v_des[0] - vb[0]) + c * vb[0],
        m * gains.vel_bandwidth * (v_des[1] - vb[1]) + c * vb[1],
    ];
    let f = clamp_norm([force[0] / params.force_limit, force[1] / params.force_limit], 1.0);

    let w_des = match goal.heading {
        Some(h) => (gains.heading_gain * h[1].atan2(h[0])).clamp(-gains.max_yaw_rate, gains.max_yaw_rate),
        None => 0.0,
    };
    let torque =
        params.base_inertia * gains.yaw_bandwidth * (w_des - state.yaw_rate) + mu * params.yaw_damping * state.yaw_rate;
    let yaw = (torque / params.yaw_torque_limit).clamp(-1.0, 1.0);

    let target = goal.posture.unwrap_or(state.q);
    let inertia = params.link_inertias();
    let grav = params.gravity_torques(state.q);
    let w = gains.arm_frequency;
    let mut arm = [0.0; 2];
    for j in 0..2 {
        let err = wrap_angle(target[j] - state.q[j]);
        let tau = inertia[j] * (w * w * err - 2.0 * w * state.qd[j]) + grav[j] + params.joint_damping * state.qd[j];
        arm[j] = (tau / params.joint_torque_limits[j]).clamp(-1.0, 1.0);
    }
    [f[0], f[1], yaw, arm[0], arm[1]]
}
