use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pose_features, AdapterError, Mode, PromptSpec, TaskEncoder, TaskEncoderConfig, POSE_FEATURES_DIM};
use crate::bfm::{pack_tokens, proprio, Bfm, BfmError, Checkpoint, PoseGoal, GOAL_FEATURES, PROPRIO_DIM};
use crate::numgrad::{Activation, GaussianDist, Mlp, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::sim::{TaskEnv, TaskKind, ACTION_DIM};

/// Everything a policy sees at one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub proprio: [f64; PROPRIO_DIM],
    /// Egocentric task features `g_t`.
    pub goal: Vec<f64>,
    /// Current-pose subset of `proprio` for the task encoder.
    pub pose: [f64; POSE_FEATURES_DIM],
    /// Prior tokens active at this step.
    pub priors: Vec<PoseGoal>,
}

pub fn observe(env: &TaskEnv, prompt: &PromptSpec) -> Observation {
    let p = proprio(env.state(), &env.params);
    Observation {
        proprio: p,
        goal: env.observation().0,
        pose: pose_features(&p),
        priors: prompt.active_goals(env.state(), env.goal()),
    }
}

/// Architecture of everything trained on top of (or instead of) the trunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub encoder: TaskEncoderConfig,
    pub prompt: PromptSpec,
    /// Hidden widths of the from-scratch actor (pure PPO only).
    pub actor_hidden: Vec<usize>,
    pub actor_init_log_std: f64,
    pub critic_hidden: Vec<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            encoder: TaskEncoderConfig::default(),
            prompt: PromptSpec::default(),
            actor_hidden: vec![256, 256],
            actor_init_log_std: -1.2,
            critic_hidden: vec![1024, 1024, 1024],
        }
    }
}

/// Per-row action means, the shared log-std, and per-row values.
pub type BatchEval = (Vec<[f64; ACTION_DIM]>, Vec<f64>, Vec<f64>);

/// Actor parameters a mode would update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSet {
    pub mode: Mode,
    pub names: Vec<String>,
    pub count: usize,
}

/// Actor (and critic) for one task under one mode. All parameters share one
/// store: `bfm.*` from the pretrained checkpoint, `task_encoder.*`,
/// `actor.*` for pure PPO, `critic.*`.
#[derive(Debug, Clone)]
pub struct Policy {
    pub mode: Mode,
    pub task: TaskKind,
    pub cfg: PolicyConfig,
    pub store: ParamStore<f32>,
    pub bfm: Option<Bfm>,
    pub encoder: Option<TaskEncoder>,
    pub actor: Option<Mlp>,
    pub actor_log_std: Option<ParamId>,
    pub critic: Mlp,
    /// Hash of the trunk checkpoint this policy was built on.
    pub bfm_sha256: Option<String>,
}

fn matrix<F: Real>(tape: &mut Tape<F>, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, AdapterError> {
    Ok(tape.constant(Tensor::new(vec![rows, cols], data.into_iter().map(F::of).collect())?)?)
}

impl Policy {
    /// Builds a fresh policy. Trunk modes need the pretrained checkpoint.
    pub fn new(
        mode: Mode,
        task: TaskKind,
        cfg: PolicyConfig,
        bfm_ckpt: Option<&Checkpoint>,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        cfg.prompt.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gdim = task.goal_dim();
        let (bfm, bfm_sha256) = if mode.uses_bfm() {
            let ckpt =
                bfm_ckpt.ok_or_else(|| AdapterError::Config(format!("mode {mode} needs a pretrained checkpoint")))?;
            (
                Some(Bfm::from_checkpoint(ckpt, &mut store)?),
                Some(ckpt.manifest.sha256.clone()),
            )
        } else {
            (None, None)
        };
        let encoder = match (&bfm, mode) {
            (Some(b), Mode::TaskTokens | Mode::FullFinetune) => Some(TaskEncoder::new(
                &mut store,
                cfg.encoder.clone(),
                gdim,
                b.cfg.d_model,
                &mut rng,
            )?),
            _ => None,
        };
        let (actor, actor_log_std) = if mode == Mode::PurePpo {
            let mut sizes = vec![PROPRIO_DIM + gdim];
            sizes.extend(&cfg.actor_hidden);
            sizes.push(ACTION_DIM);
            let mlp = Mlp::new(
                &mut store,
                "actor.net",
                &sizes,
                Activation::Tanh,
                Activation::Identity,
                &mut rng,
            )?;
            let w = mlp.last().weight;
            store.get_mut(w).value.data_mut().iter_mut().for_each(|v| *v *= 0.01);
            let ls = store.add(
                "actor.log_std",
                Tensor::filled(&[ACTION_DIM], cfg.actor_init_log_std as f32),
            )?;
            (Some(mlp), Some(ls))
        } else {
            (None, None)
        };
        let mut sizes = vec![PROPRIO_DIM + gdim];
        sizes.extend(&cfg.critic_hidden);
        sizes.push(1);
        let critic = Mlp::new(
            &mut store,
            "critic",
            &sizes,
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;

        let mut policy = Self {
            mode,
            task,
            cfg,
            store,
            bfm,
            encoder,
            actor,
            actor_log_std,
            critic,
            bfm_sha256,
        };
        policy.apply_trainable();
        Ok(policy)
    }

    /// Sets trainable flags: the mode's actor prefixes plus the critic
    /// (except for prompt-only, which trains nothing).
    pub fn apply_trainable(&mut self) {
        self.store.set_all_trainable(false);
        for p in self.mode.trainable_prefixes() {
            self.store.set_trainable_prefix(p, true);
        }
        if self.mode != Mode::PromptOnly {
            self.store.set_trainable_prefix("critic.", true);
        }
    }

    pub fn goal_dim(&self) -> usize {
        self.task.goal_dim()
    }

    fn check_obs(&self, obs: &[&Observation]) -> Result<(), AdapterError> {
        if obs.is_empty() {
            return Err(AdapterError::Config("empty observation batch".into()));
        }
        let g = self.goal_dim();
        if let Some(o) = obs.iter().find(|o| o.goal.len() != g) {
            return Err(AdapterError::Config(format!(
                "{} goal features expected for {}, got {}",
                g,
                self.task,
                o.goal.len()
            )));
        }
        Ok(())
    }

    /// Batched actor: action means `[B, A]` and the shared log-std `[A]`.
    pub fn actor_forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        obs: &[&Observation],
    ) -> Result<(Var, Var), AdapterError> {
        self.check_obs(obs)?;
        let b = obs.len();
        let g = self.goal_dim();
        if let (Some(actor), Some(ls)) = (&self.actor, self.actor_log_std) {
            let x = matrix(
                tape,
                b,
                PROPRIO_DIM + g,
                obs.iter()
                    .flat_map(|o| o.proprio.iter().chain(&o.goal).copied())
                    .collect(),
            )?;
            let mean = actor.forward(store, tape, x)?;
            return Ok((mean, tape.param(store, ls)));
        }
        let bfm = self
            .bfm
            .as_ref()
            .ok_or_else(|| AdapterError::Config("policy has no actor".into()))?;
        let p = matrix(tape, b, PROPRIO_DIM, obs.iter().flat_map(|o| o.proprio).collect())?;
        let mut sources = vec![bfm.encode_state(store, tape, p)?];
        let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); b];

        let n_priors: usize = obs.iter().map(|o| o.priors.len()).sum();
        if n_priors > 0 {
            let mut feats = Vec::with_capacity(n_priors * GOAL_FEATURES);
            let mut kidx = Vec::with_capacity(n_priors);
            for (i, o) in obs.iter().enumerate() {
                for pg in &o.priors {
                    groups[i].push((sources.len(), kidx.len()));
                    feats.extend(pg.features());
                    kidx.push(pg.lookahead_index().map_err(AdapterError::Bfm)?);
                }
            }
            let f = matrix(tape, n_priors, GOAL_FEATURES, feats)?;
            sources.push(bfm.encode_goals(store, tape, f, kidx)?);
        }
        if let Some(enc) = &self.encoder {
            let gv = matrix(tape, b, g, obs.iter().flat_map(|o| o.goal.iter().copied()).collect())?;
            let ev = matrix(tape, b, POSE_FEATURES_DIM, obs.iter().flat_map(|o| o.pose).collect())?;
            let tau = enc.encode(store, tape, gv, Some(ev))?;
            for (i, grp) in groups.iter_mut().enumerate() {
                grp.push((sources.len(), i));
            }
            sources.push(tau);
        }
        for (i, grp) in groups.iter_mut().enumerate() {
            grp.push((0, i));
        }
        let packed = pack_tokens(tape, &sources, &groups)?;
        Ok(bfm.trunk(store, tape, &packed)?)
    }

    /// Batched critic `V(proprio ⊕ g)`: `[B, 1]`.
    pub fn value_forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        tape: &mut Tape<F>,
        obs: &[&Observation],
    ) -> Result<Var, AdapterError> {
        self.check_obs(obs)?;
        let g = self.goal_dim();
        let x = matrix(
            tape,
            obs.len(),
            PROPRIO_DIM + g,
            obs.iter()
                .flat_map(|o| o.proprio.iter().chain(&o.goal).copied())
                .collect(),
        )?;
        Ok(self.critic.forward(store, tape, x)?)
    }

    /// Action means, shared log-std and values for a batch, without gradients.
    pub fn evaluate_batch(&self, obs: &[&Observation]) -> Result<BatchEval, AdapterError> {
        let mut tape = Tape::skipping_frozen();
        let (mean, ls) = self.actor_forward(&self.store, &mut tape, obs)?;
        let v = self.value_forward(&self.store, &mut tape, obs)?;
        let means = tape
            .value(mean)
            .to_f64_vec()
            .chunks(ACTION_DIM)
            .map(|c| [c[0], c[1], c[2], c[3], c[4]])
            .collect();
        Ok((means, tape.value(ls).to_f64_vec(), tape.value(v).to_f64_vec()))
    }

    /// Deterministic actions (distribution means).
    pub fn act_mean(&self, obs: &[&Observation]) -> Result<Vec<[f64; ACTION_DIM]>, AdapterError> {
        let mut tape = Tape::skipping_frozen();
        let (mean, _) = self.actor_forward(&self.store, &mut tape, obs)?;
        Ok(tape
            .value(mean)
            .to_f64_vec()
            .chunks(ACTION_DIM)
            .map(|c| [c[0], c[1], c[2], c[3], c[4]])
            .collect())
    }

    /// Prefixes that make up this policy's own checkpoint.
    fn checkpoint_prefixes(&self) -> Vec<&'static str> {
        let mut p: Vec<&str> = match self.mode {
            Mode::TaskTokens => vec!["task_encoder."],
            Mode::FullFinetune => vec!["task_encoder.", "bfm."],
            Mode::PurePpo => vec!["actor."],
            Mode::PromptOnly => vec![],
        };
        p.push("critic.");
        p
    }

    /// Snapshot of the trained parameters. A frozen trunk is referenced by
    /// hash rather than copied.
    pub fn checkpoint(&self, mut metadata: BTreeMap<String, serde_json::Value>) -> Result<Checkpoint, AdapterError> {
        let config = serde_json::json!({
            "mode": self.mode,
            "task": self.task,
            "policy": self.cfg,
        });
        if let Some(sha) = &self.bfm_sha256 {
            metadata.insert("bfm_sha256".into(), serde_json::Value::String(sha.clone()));
        }
        Ok(Checkpoint::from_store(
            "policy",
            config,
            &self.store,
            &self.checkpoint_prefixes(),
            metadata,
        ))
    }

    /// Rebuilds a policy from its checkpoint (plus the trunk it was trained on).
    pub fn from_checkpoint(ckpt: &Checkpoint, bfm_ckpt: Option<&Checkpoint>) -> Result<Self, AdapterError> {
        if ckpt.manifest.kind != "policy" {
            return Err(
                BfmError::Checkpoint(format!("expected a policy checkpoint, got {:?}", ckpt.manifest.kind)).into(),
            );
        }
        let field = |k: &str| {
            ckpt.manifest
                .config
                .get(k)
                .cloned()
                .ok_or_else(|| BfmError::Checkpoint(format!("policy manifest lacks {k:?}")))
        };
        let parse = |e: serde_json::Error| BfmError::Checkpoint(format!("policy config: {e}"));
        let mode: Mode = serde_json::from_value(field("mode")?).map_err(parse)?;
        let task: TaskKind = serde_json::from_value(field("task")?).map_err(parse)?;
        let cfg: PolicyConfig = serde_json::from_value(field("policy")?).map_err(parse)?;
        if let (Some(expected), Some(b)) = (
            ckpt.manifest.metadata.get("bfm_sha256").and_then(|v| v.as_str()),
            bfm_ckpt,
        ) {
            if expected != b.manifest.sha256 {
                return Err(BfmError::Hash {
                    expected: expected.to_string(),
                    actual: b.manifest.sha256.clone(),
                }
                .into());
            }
        }
        let mut policy = Self::new(mode, task, cfg, bfm_ckpt, 0)?;
        ckpt.restore(&mut policy.store)?;
        Ok(policy)
    }
}

/// Single-observation action distribution.
pub fn policy_forward(policy: &Policy, obs: &Observation) -> Result<GaussianDist, AdapterError> {
    let mut tape = Tape::skipping_frozen();
    let (mean, ls) = policy.actor_forward(&policy.store, &mut tape, &[obs])?;
    Ok(GaussianDist::new(
        tape.value(mean).to_f64_vec(),
        tape.value(ls).to_f64_vec(),
    )?)
}

/// Actor parameters `mode` would train on this policy's components (the
/// critic is not counted).
pub fn trainable_parameters(mode: Mode, policy: &Policy) -> Result<TrainableSet, AdapterError> {
    let missing = |what: &str| AdapterError::Config(format!("mode {mode} needs {what}, which this policy lacks"));
    match mode {
        Mode::TaskTokens | Mode::FullFinetune if policy.encoder.is_none() => return Err(missing("a task encoder")),
        Mode::PurePpo if policy.actor.is_none() => return Err(missing("an MLP actor")),
        _ => {}
    }
    let prefixes = mode.trainable_prefixes();
    let (names, count) = policy
        .store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|x| p.name.starts_with(x)))
        .fold((Vec::new(), 0), |(mut names, n), (_, p)| {
            names.push(p.name.clone());
            (names, n + p.value.len())
        });
    Ok(TrainableSet { mode, names, count })
}
