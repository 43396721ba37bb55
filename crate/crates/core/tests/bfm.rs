use std::collections::BTreeMap;
use std::sync::OnceLock;

use tasktokens::bfm::{
    behavior_clone, dagger_pretrain, load_checkpoint, proprio, save_checkpoint, Bfm, PoseGoal, PretrainOutcome,
    TokenSet,
};
use tasktokens::numgrad::ParamStore;
use tasktokens::sim::{SimParams, SimState};
use tasktokens::{BfmConfig, BfmError, PretrainConfig};

fn tiny() -> (PretrainConfig, BfmConfig) {
    let pre = PretrainConfig {
        iterations: 3,
        states_per_iter: 256,
        envs: 16,
        grad_steps: 10,
        batch_size: 32,
        validation_states: 128,
        ..PretrainConfig::default()
    };
    let model = BfmConfig {
        d_model: 16,
        heads: 2,
        ff_width: 32,
        encoder_hidden: vec![16],
        ..BfmConfig::default()
    };
    (pre, model)
}

fn pretrained() -> &'static PretrainOutcome {
    static CELL: OnceLock<PretrainOutcome> = OnceLock::new();
    CELL.get_or_init(|| {
        let (pre, model) = tiny();
        dagger_pretrain(&pre, &model, &SimParams::default(), 5, None).unwrap()
    })
}

fn probe_tokens(bfm: &Bfm, store: &ParamStore<f32>) -> TokenSet {
    let s = SimState {
        vel: [0.3, -0.1],
        q: [0.2, -0.4],
        ..SimState::default()
    };
    let goal = PoseGoal::full([1.5, -0.5], [0.0, 1.0], [0.3, 0.1], 15);
    let state_token = bfm.state_token(store, &proprio(&s, &SimParams::default())).unwrap();
    TokenSet::new(vec![bfm.goal_token(store, &goal).unwrap()], state_token)
}

#[test]
fn always_expert_dagger_is_behavior_cloning() {
    let (mut pre, model) = tiny();
    pre.beta_start = 1.0;
    pre.beta_end = 1.0;
    let d = dagger_pretrain(&pre, &model, &SimParams::default(), 11, None).unwrap();
    let b = behavior_clone(&pre, &model, &SimParams::default(), 11).unwrap();
    assert_eq!(d.checkpoint.manifest.sha256, b.checkpoint.manifest.sha256);
    assert_eq!(d.history, b.history);
}

#[test]
fn masked_goal_equals_state_only_input() {
    let o = pretrained();
    let full = probe_tokens(&o.bfm, &o.store);
    let state_only = TokenSet::new(vec![], full.rows.last().unwrap().clone());
    let masked = o.bfm.trunk_forward(&o.store, &full.clone().masked(&[false])).unwrap();
    let absent = o.bfm.trunk_forward(&o.store, &state_only).unwrap();
    for (a, b) in masked.mean.iter().zip(&absent.mean) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    let conditioned = o.bfm.trunk_forward(&o.store, &full).unwrap();
    assert_ne!(conditioned.mean, masked.mean, "the goal token must matter");
}

#[test]
fn pretraining_history_has_an_initial_row_then_one_per_iteration() {
    let o = pretrained();
    assert_eq!(o.history.len(), 4);
    assert!(o.history[0].train_mse.is_none());
    assert_eq!(o.history[0].val_mse, o.initial_val_mse);
    assert!(o.final_val_mse.is_finite() && o.initial_val_mse > 0.0);
}

#[test]
fn checkpoint_file_round_trip_rebuilds_the_same_model() {
    let o = pretrained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bfm.ckpt");
    save_checkpoint(&o.checkpoint, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, o.checkpoint);

    let mut store = ParamStore::new();
    let bfm = Bfm::from_checkpoint(&loaded, &mut store).unwrap();
    let again = bfm.checkpoint(&store, BTreeMap::new()).unwrap();
    assert_eq!(again.manifest.sha256, o.checkpoint.manifest.sha256);
    let a = o.bfm.trunk_forward(&o.store, &probe_tokens(&o.bfm, &o.store)).unwrap();
    let b = bfm.trunk_forward(&store, &probe_tokens(&bfm, &store)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn damaged_checkpoint_files_are_rejected() {
    let o = pretrained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bfm.ckpt");
    save_checkpoint(&o.checkpoint, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut flipped = bytes.clone();
    let mid = flipped.len() - 17;
    flipped[mid] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(load_checkpoint(&path).is_err());

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    assert!(matches!(
        load_checkpoint(&dir.path().join("missing")),
        Err(BfmError::Io(_))
    ));
}
