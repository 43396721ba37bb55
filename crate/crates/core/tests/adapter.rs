use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tasktokens::adapter::{
    observe, policy_forward, trainable_parameters, Mode, Policy, PolicyConfig, PriorSpec, PromptSpec,
};
use tasktokens::bfm::{Bfm, BfmError, Checkpoint};
use tasktokens::numgrad::ParamStore;
use tasktokens::sim::{EnvConfig, SimParams, TaskEnv, TaskKind};
use tasktokens::{AdapterError, BfmConfig};

fn bfm_ckpt(seed: u64) -> (Checkpoint, usize) {
    let mut store = ParamStore::<f32>::new();
    let cfg = BfmConfig {
        d_model: 16,
        heads: 2,
        ff_width: 32,
        encoder_hidden: vec![16],
        ..BfmConfig::default()
    };
    let bfm = Bfm::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (bfm.checkpoint(&store, BTreeMap::new()).unwrap(), bfm.param_count())
}

fn cfg() -> PolicyConfig {
    PolicyConfig {
        actor_hidden: vec![32, 32],
        critic_hidden: vec![32],
        ..PolicyConfig::default()
    }
}

#[test]
fn trainable_sets_follow_the_mode() {
    let (ckpt, trunk) = bfm_ckpt(0);
    let tt = Policy::new(Mode::TaskTokens, TaskKind::Reach, cfg(), Some(&ckpt), 0).unwrap();
    let enc = tt.encoder.as_ref().unwrap().param_count();

    let t = trainable_parameters(Mode::TaskTokens, &tt).unwrap();
    assert_eq!(t.count, enc);
    assert!(t.names.iter().all(|n| n.starts_with("task_encoder.")));

    let f = trainable_parameters(Mode::FullFinetune, &tt).unwrap();
    assert_eq!(f.count, enc + trunk);

    assert_eq!(trainable_parameters(Mode::PromptOnly, &tt).unwrap().count, 0);
    assert!(matches!(
        trainable_parameters(Mode::PurePpo, &tt),
        Err(AdapterError::Config(_))
    ));

    let pure = Policy::new(Mode::PurePpo, TaskKind::Reach, cfg(), None, 0).unwrap();
    let p = trainable_parameters(Mode::PurePpo, &pure).unwrap();
    assert!(p.names.iter().all(|n| n.starts_with("actor.")));
    assert!(p.count > 0);
    assert!(trainable_parameters(Mode::TaskTokens, &pure).is_err());
}

#[test]
fn only_the_mode_s_parameters_and_the_critic_are_left_trainable() {
    let (ckpt, _) = bfm_ckpt(0);
    for mode in [Mode::TaskTokens, Mode::FullFinetune, Mode::PromptOnly] {
        let policy = Policy::new(mode, TaskKind::Direction, cfg(), Some(&ckpt), 0).unwrap();
        for (_, p) in policy.store.iter() {
            let want = mode.trainable_prefixes().iter().any(|x| p.name.starts_with(x))
                || (p.name.starts_with("critic.") && mode != Mode::PromptOnly);
            assert_eq!(p.trainable, want, "{mode}: {}", p.name);
        }
    }
}

#[test]
fn policy_checkpoint_restores_the_same_actions() {
    let (ckpt, _) = bfm_ckpt(1);
    let policy = Policy::new(Mode::TaskTokens, TaskKind::Steering, cfg(), Some(&ckpt), 4).unwrap();
    let saved = Checkpoint::from_bytes(&policy.checkpoint(BTreeMap::new()).unwrap().to_bytes().unwrap()).unwrap();
    let back = Policy::from_checkpoint(&saved, Some(&ckpt)).unwrap();

    let mut env = TaskEnv::new(TaskKind::Steering, SimParams::default(), EnvConfig::default()).unwrap();
    env.reset(&mut ChaCha8Rng::seed_from_u64(2));
    let obs = observe(&env, &policy.cfg.prompt);
    assert_eq!(
        policy_forward(&policy, &obs).unwrap(),
        policy_forward(&back, &obs).unwrap()
    );
}

#[test]
fn policy_checkpoint_refuses_a_different_trunk() {
    let (ckpt, _) = bfm_ckpt(1);
    let (other, _) = bfm_ckpt(2);
    let policy = Policy::new(Mode::TaskTokens, TaskKind::Reach, cfg(), Some(&ckpt), 0).unwrap();
    let saved = policy.checkpoint(BTreeMap::new()).unwrap();
    let err = Policy::from_checkpoint(&saved, Some(&other)).unwrap_err();
    assert!(matches!(err, AdapterError::Bfm(BfmError::Hash { .. })), "{err}");
    assert!(
        Policy::from_checkpoint(&ckpt, Some(&ckpt)).is_err(),
        "a trunk checkpoint is not a policy"
    );
}

#[test]
fn prior_tokens_change_the_action() {
    let (ckpt, _) = bfm_ckpt(3);
    let with_prior = PolicyConfig {
        prompt: PromptSpec::new(vec![PriorSpec::facing()]),
        ..cfg()
    };
    let plain = Policy::new(Mode::PromptOnly, TaskKind::Steering, cfg(), Some(&ckpt), 0).unwrap();
    let prompted = Policy::new(Mode::PromptOnly, TaskKind::Steering, with_prior, Some(&ckpt), 0).unwrap();
    let mut env = TaskEnv::new(TaskKind::Steering, SimParams::default(), EnvConfig::default()).unwrap();
    env.reset(&mut ChaCha8Rng::seed_from_u64(5));
    let a = policy_forward(&plain, &observe(&env, &plain.cfg.prompt)).unwrap();
    let b = policy_forward(&prompted, &observe(&env, &prompted.cfg.prompt)).unwrap();
    assert_ne!(a.mean, b.mean);
}
