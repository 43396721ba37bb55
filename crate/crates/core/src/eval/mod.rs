//! Deterministic success-rate evaluation, seed statistics, physics sweeps
//! and the encoder ablation grid.

mod ablation;
mod sweep;

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{observe, AdapterError, Mode, Observation, Policy};
use crate::bfm::{expert_action, ExpertGains, PoseGoal};
use crate::sim::{
    facing_error, norm, sub, EnvConfig, SimError, SimParams, SimState, TaskEnv, TaskGoal, TaskKind, Termination,
    ACTION_DIM,
};

pub use ablation::{ablation_run, read_ablation_csv, write_ablation_csv, AblationRow, AblationSpec, PriorAxis};
pub use sweep::{ood_sweep, read_sweep_csv, write_sweep_csv, SweepGrid, SweepRow};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Ppo(#[from] Box<crate::ppo::PpoError>),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Something that picks actions for a batch of running episodes.
pub trait Controller {
    fn act(&mut self, envs: &[&TaskEnv]) -> Result<Vec<[f64; ACTION_DIM]>, EvalError>;
}

/// Mean action of a trained policy.
#[derive(Debug, Clone, Copy)]
pub struct PolicyController<'a> {
    pub policy: &'a Policy,
}

impl<'a> PolicyController<'a> {
    pub fn new(policy: &'a Policy) -> Self {
        Self { policy }
    }
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, envs: &[&TaskEnv]) -> Result<Vec<[f64; ACTION_DIM]>, EvalError> {
        let obs: Vec<Observation> = envs.iter().map(|e| observe(e, &self.policy.cfg.prompt)).collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        Ok(self.policy.act_mean(&refs)?)
    }
}

/// Uniform random actions in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for RandomController {
    fn act(&mut self, envs: &[&TaskEnv]) -> Result<Vec<[f64; ACTION_DIM]>, EvalError> {
        Ok(envs
            .iter()
            .map(|_| std::array::from_fn(|_| self.rng.gen_range(-1.0..=1.0)))
            .collect())
    }
}

/// The scripted pose tracker, fed a hand-written task-to-pose mapping.
/// Supports Direction, Steering and Reach.
#[derive(Debug, Clone)]
pub struct ExpertController {
    pub gains: ExpertGains,
    pub lookahead: usize,
    /// Arm posture held while reaching.
    pub reach_posture: [f64; 2],
}

impl ExpertController {
    pub fn new(task: TaskKind) -> Result<Self, EvalError> {
        match task {
            TaskKind::Direction | TaskKind::Steering | TaskKind::Reach => Ok(Self {
                gains: ExpertGains::default(),
                lookahead: 15,
                reach_posture: [1.2, 0.0],
            }),
            other => Err(EvalError::Config(format!("no scripted pose mapping for {other}"))),
        }
    }

    /// The pose goal the expert tracks for the current state.
    pub fn pose_goal(&self, state: &SimState, goal: &TaskGoal, params: &SimParams) -> Result<PoseGoal, EvalError> {
        let k = self.lookahead;
        // Position offset whose proportional command is exactly `v·d`.
        let cruise = |d: [f64; 2], v: f64| {
            let s = v / self.gains.position_gain(k);
            [state.pos[0] + d[0] * s, state.pos[1] + d[1] * s]
        };
        let angle = |v: [f64; 2]| v[1].atan2(v[0]);
        Ok(match *goal {
            TaskGoal::Direction { direction, speed } => {
                PoseGoal::from_world(state, Some(cruise(direction, speed)), Some(angle(direction)), None, k)
            }
            TaskGoal::Steering {
                direction,
                speed,
                facing,
            } => PoseGoal::from_world(state, Some(cruise(direction, speed)), Some(angle(facing)), None, k),
            TaskGoal::Reach { target } => {
                let reach = SimState {
                    q: self.reach_posture,
                    ..SimState::default()
                }
                .hand_local(params)[0];
                let d = sub(target, state.pos);
                let n = norm(d);
                let u = if n > 1e-9 {
                    [d[0] / n, d[1] / n]
                } else {
                    [state.heading.cos(), state.heading.sin()]
                };
                let base = [target[0] - reach * u[0], target[1] - reach * u[1]];
                PoseGoal::from_world(state, Some(base), Some(angle(u)), Some(self.reach_posture), k)
            }
            _ => {
                return Err(EvalError::Config(format!(
                    "no scripted pose mapping for {}",
                    goal.kind()
                )))
            }
        })
    }
}

impl Controller for ExpertController {
    fn act(&mut self, envs: &[&TaskEnv]) -> Result<Vec<[f64; ACTION_DIM]>, EvalError> {
        envs.iter()
            .map(|e| {
                let g = self.pose_goal(e.state(), e.goal(), &e.params)?;
                Ok(expert_action(e.state(), &g, &e.params, &self.gains))
            })
            .collect()
    }
}

/// Task and physics an evaluation runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetup {
    pub task: TaskKind,
    pub params: SimParams,
    pub env: EnvConfig,
}

impl EvalSetup {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            params: SimParams::default(),
            env: EnvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub success: bool,
    pub episode_return: f64,
    pub steps: usize,
    /// Mean unsigned facing error over every step of the episode (radians).
    pub mean_facing_error: f64,
    pub termination: Termination,
}

/// All episodes of one evaluation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub task: TaskKind,
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalRun {
    /// Percentage of successful episodes, in `[0, 100]`.
    pub fn success_rate(&self) -> f64 {
        100.0 * self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        self.episodes.iter().map(|e| e.episode_return).sum::<f64>() / self.episodes.len() as f64
    }

    /// Percentage of episodes whose mean facing error stayed below `threshold`.
    pub fn facing_rate(&self, threshold: f64) -> f64 {
        100.0 * self.episodes.iter().filter(|e| e.mean_facing_error < threshold).count() as f64
            / self.episodes.len() as f64
    }
}

/// Episodes are stepped in lockstep batches of this size.
const EVAL_BATCH: usize = 128;

/// Runs `episodes` deterministic episodes. Episode `i` draws its goal and
/// heading from stream `i` of `seed`, so the result does not depend on how
/// episodes are batched.
pub fn evaluate(
    controller: &mut dyn Controller,
    setup: &EvalSetup,
    episodes: usize,
    seed: u64,
) -> Result<EvalRun, EvalError> {
    if episodes == 0 {
        return Err(EvalError::Config("need at least one evaluation episode".into()));
    }
    let template = TaskEnv::new(setup.task, setup.params.clone(), setup.env.clone())?;
    let mut records = Vec::with_capacity(episodes);
    for start in (0..episodes).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(episodes);
        let mut envs: Vec<TaskEnv> = (start..end)
            .map(|i| {
                let mut env = template.clone();
                env.reset(&mut crate::ppo::env_rng(seed, i));
                env
            })
            .collect();
        let mut ret = vec![0.0; envs.len()];
        let mut facing = vec![0.0; envs.len()];
        let mut done: Vec<Option<EpisodeRecord>> = vec![None; envs.len()];
        loop {
            let live: Vec<usize> = (0..envs.len()).filter(|&i| done[i].is_none()).collect();
            if live.is_empty() {
                break;
            }
            let refs: Vec<&TaskEnv> = live.iter().map(|&i| &envs[i]).collect();
            let actions = controller.act(&refs)?;
            if actions.len() != live.len() {
                return Err(EvalError::Contract(format!(
                    "controller returned {} actions for {} episodes",
                    actions.len(),
                    live.len()
                )));
            }
            for (&i, a) in live.iter().zip(&actions) {
                let out = envs[i].step(a)?;
                ret[i] += out.reward;
                facing[i] += facing_error(envs[i].state(), envs[i].goal());
                if out.done {
                    let steps = envs[i].steps();
                    done[i] = Some(EpisodeRecord {
                        episode: start + i,
                        success: out.success.unwrap_or(false),
                        episode_return: ret[i],
                        steps,
                        mean_facing_error: facing[i] / steps as f64,
                        termination: out.termination.unwrap_or(Termination::Horizon),
                    });
                }
            }
        }
        records.extend(done.into_iter().flatten());
    }
    Ok(EvalRun {
        task: setup.task,
        seed,
        episodes: records,
    })
}

/// Arithmetic mean and sample standard deviation (`n − 1`). A single rate
/// has zero spread.
pub fn seeds_summary(rates: &[f64]) -> Result<(f64, f64), EvalError> {
    if rates.is_empty() {
        return Err(EvalError::Contract("seeds_summary of an empty list".into()));
    }
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    if rates.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Per-seed success rates of one policy family on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: TaskKind,
    pub mode: Option<Mode>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub rates: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn new(
        task: TaskKind,
        mode: Option<Mode>,
        episodes: usize,
        seeds: Vec<u64>,
        rates: Vec<f64>,
    ) -> Result<Self, EvalError> {
        if seeds.len() != rates.len() {
            return Err(EvalError::Contract(format!(
                "{} seeds but {} rates",
                seeds.len(),
                rates.len()
            )));
        }
        let (mean, std) = seeds_summary(&rates)?;
        Ok(Self {
            task,
            mode,
            episodes,
            seeds,
            rates,
            mean,
            std,
        })
    }
}

/// One controller, several evaluation seeds.
pub fn evaluate_seeds(
    controller: &mut dyn Controller,
    setup: &EvalSetup,
    episodes: usize,
    seeds: &[u64],
    mode: Option<Mode>,
) -> Result<EvalReport, EvalError> {
    let rates = seeds
        .iter()
        .map(|&s| evaluate(controller, setup, episodes, s).map(|r| r.success_rate()))
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::new(setup.task, mode, episodes, seeds.to_vec(), rates)
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    task: TaskKind,
    mode: String,
    episodes: usize,
    seed: u64,
    success_rate: f64,
}

/// One row per seed; the summary is recomputed on read.
pub fn write_report_csv(report: &EvalReport, out: impl Write) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for (seed, rate) in report.seeds.iter().zip(&report.rates) {
        w.serialize(ReportRow {
            task: report.task,
            mode: report.mode.map_or_else(|| "-".to_string(), |m| m.to_string()),
            episodes: report.episodes,
            seed: *seed,
            success_rate: *rate,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(input: impl Read) -> Result<EvalReport, EvalError> {
    let rows = csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<ReportRow>, _>>()?;
    let first = rows.first().ok_or_else(|| EvalError::Contract("empty report".into()))?;
    let mode = match first.mode.as_str() {
        "-" => None,
        m => Some(m.parse()?),
    };
    if rows
        .iter()
        .any(|r| r.task != first.task || r.mode != first.mode || r.episodes != first.episodes)
    {
        return Err(EvalError::Contract(
            "report rows disagree on task, mode or episodes".into(),
        ));
    }
    EvalReport::new(
        first.task,
        mode,
        first.episodes,
        rows.iter().map(|r| r.seed).collect(),
        rows.iter().map(|r| r.success_rate).collect(),
    )
}
