use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{MeasurementStats, SimError, SimState, Termination, ACTION_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// State after the action was applied.
    pub state: SimState,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
}

/// Full record of one episode; `termination` is set once it has ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub initial: SimState,
    pub steps: Vec<TraceStep>,
    pub termination: Option<Termination>,
    pub stats: Option<MeasurementStats>,
}

impl EpisodeTrace {
    pub fn new(initial: SimState) -> Self {
        Self {
            initial,
            steps: Vec::new(),
            termination: None,
            stats: None,
        }
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// One row per control step: time, base pose and velocity, joints, block tilt,
    /// action and reward.
    pub fn write_csv(&self, out: impl Write) -> Result<(), SimError> {
        let io = |e: csv::Error| SimError::Contract(format!("writing trace: {e}"));
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "t", "x", "y", "heading", "vx", "vy", "yaw_rate", "q1", "q2", "tilt", "a0", "a1", "a2", "a3", "a4",
            "reward",
        ])
        .map_err(io)?;
        for s in &self.steps {
            let st = &s.state;
            let mut row = vec![
                st.time,
                st.pos[0],
                st.pos[1],
                st.heading,
                st.vel[0],
                st.vel[1],
                st.yaw_rate,
                st.q[0],
                st.q[1],
                st.block.map_or(0.0, |b| b.tilt),
            ];
            row.extend_from_slice(&s.action);
            row.push(s.reward);
            w.write_record(row.iter().map(|v| format!("{v}"))).map_err(io)?;
        }
        w.flush()
            .map_err(|e| SimError::Contract(format!("writing trace: {e}")))?;
        Ok(())
    }
}
