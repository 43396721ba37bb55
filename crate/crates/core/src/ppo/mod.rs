//! Clipped-surrogate policy optimization with generalized advantage estimation.

mod rollout;
mod train;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterError;
use crate::bfm::BfmError;
use crate::numgrad::{gaussian_entropy, AdamConfig, NumError, Real, Tape, Tensor, Var};
use crate::sim::SimError;

pub(crate) use rollout::env_rng;
pub use rollout::{collect_rollouts, RolloutBuffer, VecEnv};
pub use train::{read_metrics_csv, train, write_metrics_csv, MetricsRow, TrainOutcome, TrainSetup};

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Bfm(#[from] BfmError),
    #[error("env {env}: {source}")]
    Env { env: usize, source: SimError },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged at update {update}: {detail}")]
    Training { update: usize, detail: String },
    #[error(transparent)]
    Eval(#[from] Box<crate::eval::EvalError>),
    #[error("metrics CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub vf_coef: f64,
    pub ent_coef: f64,
    /// Multiplies rewards before GAE so value targets stay O(10).
    pub reward_scale: f64,
    /// Rollout length `T` per environment.
    pub rollout_len: usize,
    /// Parallel environments `N`.
    pub n_envs: usize,
    /// Total environment-step budget.
    pub total_steps: usize,
    pub adam: AdamConfig,
    /// Decay the learning rate linearly from `adam.lr` towards zero over the run.
    pub anneal_lr: bool,
    /// Evaluate every this many updates (and after the last one).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Write a policy checkpoint every this many updates; `0` writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 8,
            vf_coef: 0.5,
            ent_coef: 0.005,
            reward_scale: 1.0,
            rollout_len: 64,
            n_envs: 64,
            total_steps: 2_000_000,
            adam: AdamConfig::default(),
            anneal_lr: false,
            eval_every: 10,
            eval_episodes: 64,
            checkpoint_every: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: String| Err(PpoError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip {} must be positive", self.clip));
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad(format!("reward_scale {} must be positive", self.reward_scale));
        }
        if self.rollout_len == 0 || self.n_envs == 0 || self.epochs == 0 || self.minibatches == 0 {
            return bad("rollout_len, n_envs, epochs and minibatches must be positive".into());
        }
        if self.minibatches > self.batch_size() {
            return bad(format!(
                "{} minibatches exceed the batch of {}",
                self.minibatches,
                self.batch_size()
            ));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive".into());
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.rollout_len * self.n_envs
    }

    /// Number of collect/update cycles the budget allows (at least one).
    pub fn updates(&self) -> usize {
        (self.total_steps / self.batch_size()).max(1)
    }
}

/// GAE over one environment stream. `values` has one more entry than
/// `rewards`: the bootstrap value after the last step. `dones[t]` marks that
/// the episode ended on step `t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(PpoError::Contract(format!(
            "compute_gae: {n} rewards need {} values and {n} dones, got {} and {}",
            n + 1,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, std 1 (population std, `1e-8` floor).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// Scalar summaries of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossDiagnostics {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio left `[1 − ε, 1 + ε]`.
    pub clip_frac: f64,
    /// `mean((ρ − 1) − ln ρ)`, a non-negative KL estimate.
    pub approx_kl: f64,
}

/// Per-sample constants of the surrogate.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub old_logp: &'a [f64],
    /// Already normalized advantages.
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// `L = −mean(min(ρA, clip(ρ, 1−ε, 1+ε)A)) + c_v·mean((V − R)²) − c_ent·H`
/// with `ρ = exp(new_logp − old_logp)`. `new_logp` is `[B]`, `values` is
/// `[B]` or `[B, 1]`, `log_std` the shared `[A]` vector.
pub fn ppo_loss<F: Real>(
    tape: &mut Tape<F>,
    new_logp: Var,
    values: Var,
    log_std: Var,
    batch: LossBatch<'_>,
    cfg: &PpoConfig,
) -> Result<(Var, LossDiagnostics), PpoError> {
    let b = batch.old_logp.len();
    if tape.value(new_logp).len() != b
        || batch.advantages.len() != b
        || batch.returns.len() != b
        || tape.value(values).len() != b
    {
        return Err(PpoError::Contract(format!(
            "ppo_loss: inconsistent batch sizes (expected {b})"
        )));
    }
    let vec_of = |x: &[f64], shape: &[usize]| Tensor::new(shape.to_vec(), x.iter().map(|v| F::of(*v)).collect());
    let lp_shape = tape.shape(new_logp).to_vec();
    let neg_old: Vec<f64> = batch.old_logp.iter().map(|v| -v).collect();
    let log_ratio = tape.add_const(new_logp, &vec_of(&neg_old, &lp_shape)?)?;
    let ratio = tape.exp(log_ratio)?;
    let adv = vec_of(batch.advantages, &lp_shape)?;
    let surr1 = tape.mul_const(ratio, adv.clone())?;
    let eps = F::of(cfg.clip);
    let clipped = tape.clamp(ratio, F::one() - eps, F::one() + eps)?;
    let surr2 = tape.mul_const(clipped, adv)?;
    let surr = tape.minimum(surr1, surr2)?;
    let surr_mean = tape.mean(surr)?;
    let policy = tape.scale(surr_mean, -F::one())?;

    let v_shape = tape.shape(values).to_vec();
    let neg_ret: Vec<f64> = batch.returns.iter().map(|v| -v).collect();
    let err = tape.add_const(values, &vec_of(&neg_ret, &v_shape)?)?;
    let sq = tape.square(err)?;
    let value = tape.mean(sq)?;

    let entropy = gaussian_entropy(tape, log_std)?;

    let wv = tape.scale(value, F::of(cfg.vf_coef))?;
    let we = tape.scale(entropy, F::of(-cfg.ent_coef))?;
    let partial = tape.add(policy, wv)?;
    let total = tape.add(partial, we)?;

    let ratios = tape.value(ratio).to_f64_vec();
    let clip_frac = ratios.iter().filter(|r| (**r - 1.0).abs() > cfg.clip).count() as f64 / b as f64;
    let approx_kl = ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / b as f64;
    let scalar = |v: Var, tape: &Tape<F>| tape.value(v).to_f64_vec()[0];
    let diag = LossDiagnostics {
        total: scalar(total, tape),
        policy: scalar(policy, tape),
        value: scalar(value, tape),
        entropy: scalar(entropy, tape),
        clip_frac,
        approx_kl,
    };
    if !diag.total.is_finite() {
        return Err(PpoError::Training {
            update: 0,
            detail: format!("non-finite loss {diag:?}"),
        });
    }
    Ok((total, diag))
}
