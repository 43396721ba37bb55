use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{compute_gae, PpoError};
use crate::adapter::{observe, Observation, Policy};
use crate::sim::{EnvConfig, SimParams, TaskEnv, TaskKind, ACTION_DIM};

/// Per-env random stream: the same `(seed, index)` always yields the same episodes.
pub(crate) fn env_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `N` copies of one task, each auto-resetting with its own goal stream.
#[derive(Debug, Clone)]
pub struct VecEnv {
    pub envs: Vec<TaskEnv>,
    rngs: Vec<ChaCha8Rng>,
    running_return: Vec<f64>,
    /// `(return, success)` of episodes finished since the last drain.
    finished: Vec<(f64, bool)>,
}

impl VecEnv {
    pub fn new(task: TaskKind, params: SimParams, cfg: EnvConfig, n: usize, seed: u64) -> Result<Self, PpoError> {
        let mut envs = Vec::with_capacity(n);
        let mut rngs = Vec::with_capacity(n);
        for i in 0..n {
            let mut env =
                TaskEnv::new(task, params.clone(), cfg.clone()).map_err(|source| PpoError::Env { env: i, source })?;
            let mut rng = env_rng(seed, i);
            env.reset(&mut rng);
            envs.push(env);
            rngs.push(rng);
        }
        Ok(Self {
            envs,
            rngs,
            running_return: vec![0.0; n],
            finished: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn observe(&self, policy: &Policy) -> Vec<Observation> {
        self.envs.iter().map(|e| observe(e, &policy.cfg.prompt)).collect()
    }

    /// Steps every env; finished episodes are recorded and reset in place.
    /// Time-limit truncation counts as `done`.
    pub fn step(&mut self, actions: &[[f64; ACTION_DIM]]) -> Result<(Vec<f64>, Vec<bool>), PpoError> {
        if actions.len() != self.envs.len() {
            return Err(PpoError::Contract(format!(
                "{} actions for {} envs",
                actions.len(),
                self.envs.len()
            )));
        }
        let mut rewards = Vec::with_capacity(actions.len());
        let mut dones = Vec::with_capacity(actions.len());
        for (i, (env, a)) in self.envs.iter_mut().zip(actions).enumerate() {
            let out = env.step(a).map_err(|source| PpoError::Env { env: i, source })?;
            self.running_return[i] += out.reward;
            if out.done {
                self.finished
                    .push((self.running_return[i], out.success.unwrap_or(false)));
                self.running_return[i] = 0.0;
                env.reset(&mut self.rngs[i]);
            }
            rewards.push(out.reward);
            dones.push(out.done);
        }
        Ok((rewards, dones))
    }

    pub fn drain_finished(&mut self) -> Vec<(f64, bool)> {
        std::mem::take(&mut self.finished)
    }
}

/// One `T × N` batch, stored time-major (`index = t·N + env`).
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub steps: usize,
    pub obs: Vec<Observation>,
    pub actions: Vec<[f64; ACTION_DIM]>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// `V(s_T)` per env for bootstrapping.
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.n_envs * self.steps && self.last_values.len() == self.n_envs
    }

    /// Runs GAE along each env's stream and stores advantages and returns.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64) -> Result<(), PpoError> {
        if !self.is_full() {
            return Err(PpoError::Contract("advantages need a full buffer".into()));
        }
        let (n, t) = (self.n_envs, self.steps);
        self.advantages = vec![0.0; n * t];
        self.returns = vec![0.0; n * t];
        for e in 0..n {
            let idx = |s: usize| s * n + e;
            let r: Vec<f64> = (0..t).map(|s| self.rewards[idx(s)]).collect();
            let d: Vec<bool> = (0..t).map(|s| self.dones[idx(s)]).collect();
            let mut v: Vec<f64> = (0..t).map(|s| self.values[idx(s)]).collect();
            v.push(self.last_values[e]);
            let (a, ret) = compute_gae(&r, &v, &d, gamma, lambda)?;
            for s in 0..t {
                self.advantages[idx(s)] = a[s];
                self.returns[idx(s)] = ret[s];
            }
        }
        Ok(())
    }
}

/// Samples `steps` actions per env from the current policy. Stored
/// log-probabilities are those of the behavior policy at collection time.
pub fn collect_rollouts(
    policy: &Policy,
    venv: &mut VecEnv,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<RolloutBuffer, PpoError> {
    let n = venv.len();
    let mut buf = RolloutBuffer {
        n_envs: n,
        steps,
        ..RolloutBuffer::default()
    };
    let cap = n * steps;
    buf.obs.reserve(cap);
    buf.actions.reserve(cap);
    for _ in 0..steps {
        let obs = venv.observe(policy);
        let refs: Vec<&Observation> = obs.iter().collect();
        let (means, log_std, values) = policy.evaluate_batch(&refs)?;
        let dist_ls: Vec<f64> = log_std
            .iter()
            .map(|s| s.clamp(crate::numgrad::LOG_STD_MIN, crate::numgrad::LOG_STD_MAX))
            .collect();
        let mut actions = Vec::with_capacity(n);
        for m in &means {
            let mut a = [0.0; ACTION_DIM];
            let mut lp = 0.0;
            for k in 0..ACTION_DIM {
                let z: f64 = rng.sample(StandardNormal);
                a[k] = m[k] + dist_ls[k].exp() * z;
                lp += -0.5 * z * z - dist_ls[k] - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            actions.push(a);
            buf.log_probs.push(lp);
        }
        let (rewards, dones) = venv.step(&actions)?;
        buf.obs.extend(obs);
        buf.actions.extend(actions);
        buf.values.extend(values);
        buf.rewards.extend(rewards);
        buf.dones.extend(dones);
    }
    let obs = venv.observe(policy);
    let refs: Vec<&Observation> = obs.iter().collect();
    buf.last_values = policy.evaluate_batch(&refs)?.2;
    Ok(buf)
}
