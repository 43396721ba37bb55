use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rollout::{collect_rollouts, VecEnv};
use super::{normalize_advantages, ppo_loss, LossBatch, LossDiagnostics, PpoConfig, PpoError};
use crate::adapter::{Mode, Observation, Policy, PolicyConfig};
use crate::bfm::{save_checkpoint, Checkpoint};
use crate::eval::{evaluate, EvalSetup, PolicyController};
use crate::numgrad::{gaussian_logprob, Adam, Tape, Tensor};
use crate::sim::{EnvConfig, SimParams, TaskKind, ACTION_DIM};

/// Seed offset of the periodic evaluation episodes.
const EVAL_SEED_SALT: u64 = 0xe7a1_5eed;

/// One periodic evaluation point of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_steps: usize,
    /// Percentage of deterministic evaluation episodes that succeeded.
    pub success_rate: f64,
    /// Mean evaluation-episode return.
    pub mean_reward: f64,
    /// Mean over the minibatches of the preceding update.
    pub clip_frac: f64,
    pub approx_kl: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], out: impl Write) -> Result<(), PpoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(input: impl std::io::Read) -> Result<Vec<MetricsRow>, PpoError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub mode: Mode,
    pub task: TaskKind,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub sim: SimParams,
    pub env: EnvConfig,
    pub seed: u64,
}

impl TrainSetup {
    pub fn new(mode: Mode, task: TaskKind, seed: u64) -> Self {
        Self {
            mode,
            task,
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            sim: SimParams::default(),
            env: EnvConfig::default(),
            seed,
        }
    }

    pub fn eval_setup(&self) -> EvalSetup {
        EvalSetup {
            task: self.task,
            params: self.sim.clone(),
            env: self.env.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: Policy,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    pub optimizer_steps: u64,
    pub env_steps: usize,
}

/// Collect / GAE / minibatch-update loop. Only parameters of the mode's
/// trainable set (plus the critic) move; prompt-only runs just evaluate.
///
/// With `out`, writes `metrics.csv` and policy checkpoints there.
pub fn train(
    setup: &TrainSetup,
    bfm: Option<&Checkpoint>,
    out: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, PpoError> {
    let cfg = &setup.ppo;
    cfg.validate()?;
    setup
        .sim
        .validate()
        .map_err(|source| PpoError::Env { env: 0, source })?;
    let mut policy = Policy::new(setup.mode, setup.task, setup.policy.clone(), bfm, setup.seed)?;
    let eval_setup = setup.eval_setup();
    let eval_seed = setup.seed ^ EVAL_SEED_SALT;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();

    let eval_row = |policy: &Policy, env_steps: usize, diag: LossDiagnostics| -> Result<MetricsRow, PpoError> {
        let run = evaluate(
            &mut PolicyController::new(policy),
            &eval_setup,
            cfg.eval_episodes,
            eval_seed,
        )
        .map_err(Box::new)?;
        Ok(MetricsRow {
            env_steps,
            success_rate: run.success_rate(),
            mean_reward: run.mean_return(),
            clip_frac: diag.clip_frac,
            approx_kl: diag.approx_kl,
        })
    };
    metrics.push(eval_row(&policy, 0, LossDiagnostics::default())?);

    let mut adam = Adam::new(cfg.adam, &policy.store);
    let mut env_steps = 0;
    if setup.mode != Mode::PromptOnly {
        let mut venv = VecEnv::new(
            setup.task,
            setup.sim.clone(),
            setup.env.clone(),
            cfg.n_envs,
            setup.seed.wrapping_add(1),
        )?;
        let mut sample_rng = ChaCha8Rng::seed_from_u64(setup.seed.wrapping_add(2));
        let mut sgd_rng = ChaCha8Rng::seed_from_u64(setup.seed.wrapping_add(3));
        let updates = cfg.updates();
        let batch = cfg.batch_size();
        let mb = batch / cfg.minibatches;
        for update in 1..=updates {
            if cfg.anneal_lr {
                adam.cfg.lr = cfg.adam.lr * (1.0 - (update - 1) as f64 / updates as f64);
            }
            let mut buf = collect_rollouts(&policy, &mut venv, cfg.rollout_len, &mut sample_rng)?;
            env_steps += batch;
            let rollout_reward = buf.rewards.iter().sum::<f64>() / batch as f64;
            buf.rewards.iter_mut().for_each(|r| *r *= cfg.reward_scale);
            buf.compute_advantages(cfg.gamma, cfg.lambda)?;
            normalize_advantages(&mut buf.advantages);

            let mut acc = LossDiagnostics::default();
            let mut count = 0usize;
            let mut order: Vec<usize> = (0..batch).collect();
            for _ in 0..cfg.epochs {
                order.shuffle(&mut sgd_rng);
                for chunk in order.chunks(mb) {
                    let obs: Vec<&Observation> = chunk.iter().map(|&i| &buf.obs[i]).collect();
                    let pick = |v: &[f64]| chunk.iter().map(|&i| v[i]).collect::<Vec<_>>();
                    let (old_logp, adv, ret) = (pick(&buf.log_probs), pick(&buf.advantages), pick(&buf.returns));
                    let actions = Tensor::new(
                        vec![chunk.len(), ACTION_DIM],
                        chunk.iter().flat_map(|&i| buf.actions[i].map(|a| a as f32)).collect(),
                    )?;
                    let mut tape = Tape::skipping_frozen();
                    let (mean, log_std) = policy.actor_forward(&policy.store, &mut tape, &obs)?;
                    let logp = gaussian_logprob(&mut tape, mean, log_std, actions)?;
                    let values = policy.value_forward(&policy.store, &mut tape, &obs)?;
                    let lb = LossBatch {
                        old_logp: &old_logp,
                        advantages: &adv,
                        returns: &ret,
                    };
                    let (loss, d) = ppo_loss(&mut tape, logp, values, log_std, lb, cfg).map_err(|e| match e {
                        PpoError::Training { detail, .. } => PpoError::Training { update, detail },
                        other => other,
                    })?;
                    let grads = tape.backward(loss)?;
                    policy.store.set_grads(&grads);
                    adam.step(&mut policy.store);
                    acc.total += d.total;
                    acc.policy += d.policy;
                    acc.value += d.value;
                    acc.entropy += d.entropy;
                    acc.clip_frac += d.clip_frac;
                    acc.approx_kl += d.approx_kl;
                    count += 1;
                }
            }
            let k = count.max(1) as f64;
            let diag = LossDiagnostics {
                total: acc.total / k,
                policy: acc.policy / k,
                value: acc.value / k,
                entropy: acc.entropy / k,
                clip_frac: acc.clip_frac / k,
                approx_kl: acc.approx_kl / k,
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "update {update}/{updates} steps {env_steps} reward/step {rollout_reward:.4} loss {:.4} value {:.4} clip {:.3} kl {:.5}",
                    diag.total, diag.value, diag.clip_frac, diag.approx_kl
                )?;
            }
            if update % cfg.eval_every == 0 || update == updates {
                let row = eval_row(&policy, env_steps, diag)?;
                if let Some(w) = log.as_deref_mut() {
                    writeln!(
                        w,
                        "eval at {env_steps}: success {:.1}% return {:.2}",
                        row.success_rate, row.mean_reward
                    )?;
                }
                metrics.push(row);
            }
            if let Some(dir) = out {
                if cfg.checkpoint_every > 0 && update % cfg.checkpoint_every == 0 {
                    checkpoints.push(write_policy(
                        &policy,
                        dir,
                        &format!("policy_u{update:05}.ckpt"),
                        update,
                        env_steps,
                    )?);
                }
            }
        }
    }
    if let Some(dir) = out {
        checkpoints.push(write_policy(
            &policy,
            dir,
            "policy_final.ckpt",
            metrics.len(),
            env_steps,
        )?);
        let f = std::fs::File::create(dir.join("metrics.csv"))?;
        write_metrics_csv(&metrics, std::io::BufWriter::new(f))?;
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        checkpoints,
        optimizer_steps: adam.steps(),
        env_steps,
    })
}

fn write_policy(policy: &Policy, dir: &Path, name: &str, update: usize, env_steps: usize) -> Result<PathBuf, PpoError> {
    let mut meta = BTreeMap::new();
    meta.insert("update".into(), serde_json::json!(update));
    meta.insert("env_steps".into(), serde_json::json!(env_steps));
    let path = dir.join(name);
    save_checkpoint(&policy.checkpoint(meta)?, &path)?;
    Ok(path)
}
