use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tasktokens::adapter::{observe, Mode, Observation, Policy, PolicyConfig};
use tasktokens::bfm::{proprio, Bfm, PoseGoal, TokenSet};
use tasktokens::numgrad::{ParamStore, Tape};
use tasktokens::ppo::compute_gae;
use tasktokens::sim::{control_step, EnvConfig, SimParams, SimState, TaskEnv, TaskKind};
use tasktokens::BfmConfig;

fn sim(c: &mut Criterion) {
    let p = SimParams::default();
    let s = SimState {
        vel: [0.4, 0.1],
        q: [0.3, -0.2],
        ..SimState::default()
    };
    let a = [0.6, -0.2, 0.3, 0.5, -0.4];
    c.bench_function("sim/control_step", |b| {
        b.iter(|| control_step(black_box(&s), &a, &p).unwrap())
    });
}

fn gae(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 4096;
    let r: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let v: Vec<f64> = (0..=n).map(|_| rng.gen()).collect();
    let d: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.005)).collect();
    c.bench_function("ppo/gae_4096", |b| {
        b.iter(|| compute_gae(black_box(&r), &v, &d, 0.99, 0.95).unwrap())
    });
}

fn trunk(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let bfm = Bfm::new(&mut store, BfmConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let p = SimParams::default();
    let goal = PoseGoal::full([1.0, 2.0], [0.0, 1.0], [0.2, 0.4], 15);
    let set = TokenSet::new(
        vec![bfm.goal_token(&store, &goal).unwrap()],
        bfm.state_token(&store, &proprio(&SimState::default(), &p)).unwrap(),
    );
    c.bench_function("bfm/trunk_forward_single", |b| {
        b.iter(|| bfm.trunk_forward(&store, black_box(&set)).unwrap())
    });
}

fn observations(n: usize) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..n)
        .map(|_| {
            let mut env = TaskEnv::new(TaskKind::Steering, SimParams::default(), EnvConfig::default()).unwrap();
            env.reset(&mut rng);
            observe(&env, &Default::default())
        })
        .collect()
}

fn policy(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let bfm = Bfm::new(&mut store, BfmConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ckpt = bfm.checkpoint(&store, BTreeMap::new()).unwrap();
    let policy = Policy::new(
        Mode::TaskTokens,
        TaskKind::Steering,
        PolicyConfig::default(),
        Some(&ckpt),
        0,
    )
    .unwrap();
    let obs = observations(64);
    let refs: Vec<&Observation> = obs.iter().collect();
    c.bench_function("adapter/evaluate_batch_64", |b| {
        b.iter(|| policy.evaluate_batch(black_box(&refs)).unwrap())
    });

    let big = observations(512);
    let refs: Vec<&Observation> = big.iter().collect();
    c.bench_function("adapter/actor_backward_512", |b| {
        b.iter_batched(
            Tape::skipping_frozen,
            |mut tape| {
                let (mean, _) = policy.actor_forward(&policy.store, &mut tape, &refs).unwrap();
                let loss = tape.mean(mean).unwrap();
                tape.backward(loss).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, sim, gae, trunk, policy);
criterion_main!(benches);
