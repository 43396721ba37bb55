//! DAgger distillation of the scripted expert into the token-conditioned trunk.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::expert::{expert_action, ExpertGains};
use super::model::{pack_tokens, Bfm};
use super::{proprio, BfmConfig, BfmError, PoseGoal, GOAL_FEATURES, LOOKAHEADS, PROPRIO_DIM};
use crate::numgrad::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::sim::{control_step, norm, SimParams, SimState, ACTION_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub iterations: usize,
    /// Visited states labelled per iteration.
    pub states_per_iter: usize,
    pub envs: usize,
    pub episode_steps: usize,
    pub moving_target_prob: f64,
    pub max_target_distance: f64,
    pub max_target_speed: f64,
    /// Expert-control probability at the first and last iteration (linear in between).
    pub beta_start: f64,
    pub beta_end: f64,
    pub grad_steps: usize,
    pub batch_size: usize,
    pub dataset_cap: usize,
    pub validation_states: usize,
    pub adam: AdamConfig,
    pub gains: ExpertGains,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            states_per_iter: 20_000,
            envs: 64,
            episode_steps: 90,
            moving_target_prob: 0.5,
            max_target_distance: 4.0,
            max_target_speed: 2.5,
            beta_start: 1.0,
            beta_end: 0.0,
            grad_steps: 200,
            batch_size: 256,
            dataset_cap: 200_000,
            validation_states: 2048,
            adam: AdamConfig {
                lr: 1e-3,
                max_grad_norm: 1.0,
                ..AdamConfig::default()
            },
            gains: ExpertGains::default(),
        }
    }
}

impl PretrainConfig {
    pub fn beta(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.beta_start;
        }
        let t = iteration as f64 / (self.iterations - 1) as f64;
        self.beta_start + (self.beta_end - self.beta_start) * t
    }

    fn validate(&self) -> Result<(), BfmError> {
        if self.iterations == 0 || self.envs == 0 || self.batch_size == 0 || self.episode_steps == 0 {
            return Err(BfmError::Config(
                "iterations, envs, batch_size and episode_steps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta_start) || !(0.0..=1.0).contains(&self.beta_end) {
            return Err(BfmError::Config("beta must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// World-frame pose target, optionally drifting at constant velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTarget {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub heading: f64,
    pub posture: [f64; 2],
    pub lookahead: usize,
}

impl PoseTarget {
    pub fn goal_at(&self, state: &SimState) -> PoseGoal {
        PoseGoal::from_world(
            state,
            Some(self.position),
            Some(self.heading),
            Some(self.posture),
            self.lookahead,
        )
    }

    pub fn advance(&mut self, dt: f64) {
        self.position[0] += self.velocity[0] * dt;
        self.position[1] += self.velocity[1] * dt;
    }
}

/// Target around `state`: position uniform in a disc, heading uniform, posture
/// in the forward-swing range, lookahead uniform over [`LOOKAHEADS`].
pub fn sample_pose_target(rng: &mut impl Rng, state: &SimState, max_distance: f64, moving: Option<f64>) -> PoseTarget {
    let r = max_distance * rng.gen::<f64>().sqrt();
    let a = rng.gen_range(-PI..PI);
    let velocity = match moving {
        Some(vmax) => {
            let s = rng.gen_range(0.0..=vmax);
            let b = rng.gen_range(-PI..PI);
            [s * b.cos(), s * b.sin()]
        }
        None => [0.0, 0.0],
    };
    PoseTarget {
        position: [state.pos[0] + r * a.cos(), state.pos[1] + r * a.sin()],
        velocity,
        heading: rng.gen_range(-PI..PI),
        posture: [rng.gen_range(0.0..2.2), rng.gen_range(-0.2..1.6)],
        lookahead: LOOKAHEADS[rng.gen_range(0..LOOKAHEADS.len())],
    }
}

fn random_start(rng: &mut impl Rng) -> SimState {
    let mut g = |s: f64| rng.gen_range(-s..=s);
    SimState {
        heading: g(PI),
        vel: [g(1.5), g(1.5)],
        yaw_rate: g(1.0),
        q: [g(0.3) + 0.6, g(0.3) + 0.4],
        qd: [g(1.0), g(1.0)],
        ..SimState::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Sample {
    proprio: [f64; PROPRIO_DIM],
    goal: PoseGoal,
    action: [f64; ACTION_DIM],
}

/// One token per present component: the unmasked layout used for rollouts and validation.
fn split_tokens(goal: &PoseGoal) -> Vec<PoseGoal> {
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let mut keep = [false; 3];
        keep[i] = true;
        let g = goal.restricted(keep);
        if g.component_count() == 1 {
            out.push(g);
        }
    }
    out
}

/// Random masking: each component kept with `keep`; survivors share one token
/// with probability `pack`, otherwise get one token each.
fn masked_tokens(goal: &PoseGoal, rng: &mut impl Rng, keep: f64, pack: f64) -> Vec<PoseGoal> {
    let kept = [rng.gen_bool(keep), rng.gen_bool(keep), rng.gen_bool(keep)];
    let packed = rng.gen_bool(pack);
    let g = goal.restricted(kept);
    if g.component_count() == 0 {
        vec![]
    } else if packed {
        vec![g]
    } else {
        split_tokens(&g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub iteration: usize,
    pub beta: f64,
    /// Mean minibatch loss of the iteration (absent for the initial row).
    pub train_mse: Option<f64>,
    pub val_mse: f64,
}

impl PretrainRow {
    pub fn write_csv(rows: &[PretrainRow], out: impl Write) -> Result<(), BfmError> {
        let mut w = csv::Writer::from_writer(out);
        for r in rows {
            w.serialize(r).map_err(|e| BfmError::Checkpoint(format!("csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Vec<PretrainRow>, BfmError> {
        csv::Reader::from_reader(input)
            .deserialize()
            .collect::<Result<_, _>>()
            .map_err(|e| BfmError::Checkpoint(format!("csv: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub store: ParamStore<f32>,
    pub bfm: Bfm,
    pub history: Vec<PretrainRow>,
    pub initial_val_mse: f64,
    pub final_val_mse: f64,
    /// Validation error of the final model with every goal token masked.
    pub masked_val_mse: f64,
    pub checkpoint: Checkpoint,
}

/// Maps proprioception and split goal tokens to student actions.
type StudentFn<'a> = dyn Fn(&[[f64; PROPRIO_DIM]], &[Vec<PoseGoal>]) -> Result<Vec<[f64; 5]>, BfmError> + 'a;

struct Worker {
    state: SimState,
    target: PoseTarget,
    t: usize,
}

struct Collector<'a> {
    cfg: &'a PretrainConfig,
    params: &'a SimParams,
    rng: ChaCha8Rng,
    workers: Vec<Worker>,
}

impl<'a> Collector<'a> {
    fn new(cfg: &'a PretrainConfig, params: &'a SimParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let workers = (0..cfg.envs).map(|_| Self::fresh(cfg, &mut rng)).collect();
        Self {
            cfg,
            params,
            rng,
            workers,
        }
    }

    fn fresh(cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Worker {
        let state = random_start(rng);
        let moving = rng.gen_bool(cfg.moving_target_prob).then_some(cfg.max_target_speed);
        let target = sample_pose_target(rng, &state, cfg.max_target_distance, moving);
        Worker { state, target, t: 0 }
    }

    /// Steps every worker once; `student` maps the unmasked goals to actions for
    /// the workers listed, or is skipped when every worker follows the expert.
    fn step(
        &mut self,
        beta: f64,
        mix: Option<&mut ChaCha8Rng>,
        student: &StudentFn<'_>,
        out: &mut Vec<Sample>,
    ) -> Result<(), BfmError> {
        let n = self.workers.len();
        let goals: Vec<PoseGoal> = self.workers.iter().map(|w| w.target.goal_at(&w.state)).collect();
        let props: Vec<[f64; PROPRIO_DIM]> = self.workers.iter().map(|w| proprio(&w.state, self.params)).collect();
        let experts: Vec<[f64; 5]> = self
            .workers
            .iter()
            .zip(&goals)
            .map(|(w, g)| expert_action(&w.state, g, self.params, &self.cfg.gains))
            .collect();
        let use_student: Vec<bool> = match mix {
            Some(r) => (0..n).map(|_| !r.gen_bool(beta)).collect(),
            None => vec![false; n],
        };
        let student_actions = if use_student.iter().any(|b| *b) {
            let tokens: Vec<Vec<PoseGoal>> = goals.iter().map(split_tokens).collect();
            Some(student(&props, &tokens)?)
        } else {
            None
        };
        let dt = self.params.control_dt();
        for i in 0..n {
            out.push(Sample {
                proprio: props[i],
                goal: goals[i],
                action: experts[i],
            });
            let a = match (&student_actions, use_student[i]) {
                (Some(s), true) => s[i].map(|x| x.clamp(-1.0, 1.0)),
                _ => experts[i],
            };
            let w = &mut self.workers[i];
            w.state = control_step(&w.state, &a, self.params)?.0;
            w.target.advance(dt);
            w.t += 1;
            if w.t >= self.cfg.episode_steps || norm(w.state.pos) > 50.0 {
                *w = Self::fresh(self.cfg, &mut self.rng);
            }
        }
        Ok(())
    }
}

fn batch_loss(
    bfm: &Bfm,
    store: &ParamStore<f32>,
    tape: &mut Tape<f32>,
    samples: &[&Sample],
    tokens: &[Vec<PoseGoal>],
) -> Result<crate::numgrad::Var, BfmError> {
    let b = samples.len();
    let p = tape.constant(Tensor::new(
        vec![b, PROPRIO_DIM],
        samples.iter().flat_map(|s| s.proprio.map(|v| v as f32)).collect(),
    )?)?;
    let st = bfm.encode_state(store, tape, p)?;
    let mut feats = Vec::new();
    let mut kidx = Vec::new();
    let mut groups = Vec::with_capacity(b);
    for (i, ts) in tokens.iter().enumerate() {
        let mut g = Vec::with_capacity(ts.len() + 1);
        for t in ts {
            g.push((1, kidx.len()));
            feats.extend(t.features().map(|v| v as f32));
            kidx.push(t.lookahead_index()?);
        }
        g.push((0, i));
        groups.push(g);
    }
    let mut sources = vec![st];
    if !kidx.is_empty() {
        let f = tape.constant(Tensor::new(vec![kidx.len(), GOAL_FEATURES], feats)?)?;
        sources.push(bfm.encode_goals(store, tape, f, kidx)?);
    }
    let packed = pack_tokens(tape, &sources, &groups)?;
    let (mean, _) = bfm.trunk(store, tape, &packed)?;
    let target = Tensor::new(
        vec![b, ACTION_DIM],
        samples.iter().flat_map(|s| s.action.map(|v| -v as f32)).collect(),
    )?;
    let diff = tape.add_const(mean, &target)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean(sq)?)
}

fn mse(bfm: &Bfm, store: &ParamStore<f32>, data: &[Sample], masked: bool) -> Result<f64, BfmError> {
    let mut total = 0.0;
    for chunk in data.chunks(512) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let tokens: Vec<Vec<PoseGoal>> = chunk
            .iter()
            .map(|s| if masked { vec![] } else { split_tokens(&s.goal) })
            .collect();
        let mut tape = Tape::new();
        let l = batch_loss(bfm, store, &mut tape, &refs, &tokens)?;
        total += tape.value(l).item() as f64 * chunk.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}

fn validation_set(cfg: &PretrainConfig, params: &SimParams, seed: u64) -> Result<Vec<Sample>, BfmError> {
    let mut c = Collector::new(cfg, params, seed ^ 0x005e_ed0f_7a11);
    let mut out = Vec::with_capacity(cfg.validation_states + cfg.envs);
    let never = |_: &[[f64; PROPRIO_DIM]], _: &[Vec<PoseGoal>]| -> Result<Vec<[f64; 5]>, BfmError> { unreachable!() };
    // Skip the first few steps so the set is not dominated by reset states.
    let mut steps = 0;
    while out.len() < cfg.validation_states {
        let mut batch = Vec::new();
        c.step(1.0, None, &never, &mut batch)?;
        if steps % 3 == 2 {
            out.extend(batch);
        }
        steps += 1;
    }
    out.truncate(cfg.validation_states);
    Ok(out)
}

fn run(
    cfg: &PretrainConfig,
    bfm_cfg: &BfmConfig,
    params: &SimParams,
    seed: u64,
    student_in_loop: bool,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome, BfmError> {
    cfg.validate()?;
    bfm_cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let bfm = Bfm::new(&mut store, bfm_cfg.clone(), &mut init_rng)?;
    let mut opt = Adam::new(cfg.adam, &store);
    let mut collector = Collector::new(cfg, params, seed.wrapping_add(1));
    let mut mix_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let mut sgd_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let val = validation_set(cfg, params, seed)?;

    let initial = mse(&bfm, &store, &val, false)?;
    if !initial.is_finite() {
        return Err(BfmError::Diverged {
            iteration: 0,
            detail: "initial validation loss is not finite".into(),
        });
    }
    let mut history = vec![PretrainRow {
        iteration: 0,
        beta: cfg.beta(0),
        train_mse: None,
        val_mse: initial,
    }];
    let mut dataset: Vec<Sample> = Vec::new();
    let mut head = 0usize;
    let steps_per_iter = cfg.states_per_iter.div_ceil(cfg.envs);

    for it in 0..cfg.iterations {
        let beta = cfg.beta(it);
        let mut fresh = Vec::with_capacity(steps_per_iter * cfg.envs);
        {
            let snapshot = &store;
            let student = |p: &[[f64; PROPRIO_DIM]], g: &[Vec<PoseGoal>]| bfm.act_mean(snapshot, p, g);
            for _ in 0..steps_per_iter {
                let mix = if student_in_loop { Some(&mut mix_rng) } else { None };
                collector.step(beta, mix, &student, &mut fresh)?;
            }
        }
        for s in fresh {
            if dataset.len() < cfg.dataset_cap {
                dataset.push(s);
            } else {
                dataset[head] = s;
                head = (head + 1) % cfg.dataset_cap;
            }
        }

        let mut train = 0.0;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut sgd_rng);
        let mut cursor = 0;
        for _ in 0..cfg.grad_steps {
            if cursor + cfg.batch_size > order.len() {
                order.shuffle(&mut sgd_rng);
                cursor = 0;
            }
            let idx = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
            cursor += cfg.batch_size;
            let refs: Vec<&Sample> = idx.iter().map(|&i| &dataset[i]).collect();
            let tokens: Vec<Vec<PoseGoal>> = refs
                .iter()
                .map(|s| masked_tokens(&s.goal, &mut sgd_rng, bfm_cfg.mask_keep_prob, bfm_cfg.pack_prob))
                .collect();
            let mut tape = Tape::new();
            let loss = batch_loss(&bfm, &store, &mut tape, &refs, &tokens).map_err(|e| BfmError::Diverged {
                iteration: it + 1,
                detail: e.to_string(),
            })?;
            train += tape.value(loss).item() as f64;
            let grads = tape.backward(loss)?;
            store.set_grads(&grads);
            opt.step(&mut store);
        }
        let train_mse = train / cfg.grad_steps.max(1) as f64;
        let val_mse = mse(&bfm, &store, &val, false).map_err(|e| BfmError::Diverged {
            iteration: it + 1,
            detail: e.to_string(),
        })?;
        if !val_mse.is_finite() || !train_mse.is_finite() {
            return Err(BfmError::Diverged {
                iteration: it + 1,
                detail: format!("train {train_mse}, validation {val_mse}"),
            });
        }
        let row = PretrainRow {
            iteration: it + 1,
            beta,
            train_mse: Some(train_mse),
            val_mse,
        };
        if let Some(w) = log.as_deref_mut() {
            writeln!(
                w,
                "iter {:>3}  beta {:.3}  train {:.5}  val {:.5}",
                row.iteration, beta, train_mse, val_mse
            )?;
        }
        history.push(row);
    }

    let final_val_mse = history.last().map_or(initial, |r| r.val_mse);
    let masked_val_mse = mse(&bfm, &store, &val, true)?;
    let mut meta = BTreeMap::new();
    meta.insert("iterations".into(), serde_json::json!(cfg.iterations));
    meta.insert("seed".into(), serde_json::json!(seed));
    meta.insert("initial_val_mse".into(), serde_json::json!(initial));
    meta.insert("final_val_mse".into(), serde_json::json!(final_val_mse));
    let checkpoint = bfm.checkpoint(&store, meta)?;
    Ok(PretrainOutcome {
        store,
        bfm,
        history,
        initial_val_mse: initial,
        final_val_mse,
        masked_val_mse,
        checkpoint,
    })
}

/// Iterative distillation: roll out a per-step β-mixture of expert and
/// student (student acts with its mean on the unmasked goal), relabel every
/// visited state with the expert, and regress the trunk mean onto the labels
/// under random goal masking.
pub fn dagger_pretrain(
    cfg: &PretrainConfig,
    bfm_cfg: &BfmConfig,
    params: &SimParams,
    seed: u64,
    log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome, BfmError> {
    run(cfg, bfm_cfg, params, seed, true, log)
}

/// Plain behavior cloning on expert rollouts: the student never acts.
pub fn behavior_clone(
    cfg: &PretrainConfig,
    bfm_cfg: &BfmConfig,
    params: &SimParams,
    seed: u64,
) -> Result<PretrainOutcome, BfmError> {
    run(cfg, bfm_cfg, params, seed, false, None)
}

/// Validation error of `bfm` on fresh expert states with goals masked or not.
pub fn masked_validation_mse(
    bfm: &Bfm,
    store: &ParamStore<f32>,
    cfg: &PretrainConfig,
    params: &SimParams,
    seed: u64,
    masked: bool,
) -> Result<f64, BfmError> {
    let val = validation_set(cfg, params, seed)?;
    mse(bfm, store, &val, masked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_is_linear() {
        let cfg = PretrainConfig {
            iterations: 5,
            ..PretrainConfig::default()
        };
        assert_eq!(cfg.beta(0), 1.0);
        assert_eq!(cfg.beta(4), 0.0);
        assert!((cfg.beta(2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn split_keeps_one_component_per_token() {
        let g = PoseGoal::full([1.0, 0.0], [0.0, 1.0], [0.3, 0.2], 5);
        let t = split_tokens(&g);
        assert_eq!(t.len(), 3);
        assert!(t.iter().all(|x| x.component_count() == 1));
    }

    #[test]
    fn full_keep_and_pack_gives_one_token() {
        let g = PoseGoal::full([1.0, 0.0], [0.0, 1.0], [0.3, 0.2], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = masked_tokens(&g, &mut rng, 1.0, 1.0);
        assert_eq!(t, vec![g]);
        assert!(masked_tokens(&g, &mut rng, 0.0, 0.5).is_empty());
    }
}
